//! Loss-based batch selection: selective backprop and reducible holdout loss.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MaskedBatch;
use crate::error::{Error, Result};
use crate::model::{LayerPlan, ModelParams, forward_mlm};
use crate::scalar::Scalar;

pub const DEFAULT_HISTORY: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    SelectiveBackprop,
    Rho,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub mode: SelectionMode,
    /// Selectivity exponent of selective backprop.
    pub beta: f64,
    pub mega_batch: usize,
    pub mini_batch: usize,
    /// Selection forward passes are not charged to the budget.
    pub free_selection: bool,
    pub history: usize,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config("selectivity beta must be positive".into()));
        }
        if self.mini_batch == 0 || self.mega_batch < self.mini_batch {
            return Err(Error::Config("need mega_batch >= mini_batch >= 1".into()));
        }
        if self.history == 0 {
            return Err(Error::Config("loss history capacity must be positive".into()));
        }
        Ok(())
    }
}

/// The `R` most recent losses, newest first.
#[derive(Clone, Debug, PartialEq)]
pub struct LossHistory {
    capacity: usize,
    losses: VecDeque<f64>,
}

impl LossHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            losses: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, loss: f64) {
        self.losses.push_front(loss);
        self.losses.truncate(self.capacity);
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Newest first.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.losses.iter().copied()
    }

    /// Fraction of stored losses `<= loss`.
    pub fn cdf(&self, loss: f64) -> f64 {
        if self.losses.is_empty() {
            return 1.0;
        }
        let below = self.losses.iter().filter(|&&l| l <= loss).count();
        below as f64 / self.losses.len() as f64
    }
}

/// `CDF(loss; history)^β`. Call after pushing `loss` into the history.
pub fn sb_probability(hist: &LossHistory, loss: f64, beta: f64) -> f64 {
    hist.cdf(loss).powf(beta)
}

/// Accumulates admitted examples into fixed-size mini-batches. The partial
/// mini-batch persists across calls.
#[derive(Clone, Debug)]
pub struct SbAssembler<T> {
    pub history: LossHistory,
    beta: f64,
    mini_batch: usize,
    pending: Vec<T>,
}

impl<T> SbAssembler<T> {
    pub fn new(beta: f64, mini_batch: usize, history: usize) -> Self {
        Self {
            history: LossHistory::new(history),
            beta,
            mini_batch: mini_batch.max(1),
            pending: Vec::with_capacity(mini_batch),
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Offers scored examples in order; returns every mini-batch completed.
    pub fn offer<R: Rng>(&mut self, scored: impl IntoIterator<Item = (T, f64)>, rng: &mut R) -> Vec<Vec<T>> {
        let mut done = Vec::new();
        for (item, loss) in scored {
            self.history.push(loss);
            let p = sb_probability(&self.history, loss, self.beta);
            if rng.random::<f64>() < p {
                self.pending.push(item);
            }
            if self.pending.len() == self.mini_batch {
                done.push(std::mem::replace(
                    &mut self.pending,
                    Vec::with_capacity(self.mini_batch),
                ));
            }
        }
        done
    }

    /// Drops a partially filled mini-batch.
    pub fn discard_pending(&mut self) -> usize {
        let n = self.pending.len();
        self.pending.clear();
        n
    }
}

/// Indices of the `mini_batch` largest reducible losses `ℓ - ℓ^S`, ties to the
/// lower index, returned in ascending index order.
pub fn rho_select(mega_losses: &[f64], proxy_losses: &[f64], mini_batch: usize) -> Result<Vec<usize>> {
    if mega_losses.len() != proxy_losses.len() {
        return Err(Error::shape(
            "rho_select",
            format!("{} losses vs {} proxy losses", mega_losses.len(), proxy_losses.len()),
        ));
    }
    if mini_batch > mega_losses.len() {
        return Err(Error::Config(format!(
            "mini-batch {mini_batch} larger than mega-batch {}",
            mega_losses.len()
        )));
    }
    let reducible: Vec<f64> = mega_losses.iter().zip(proxy_losses).map(|(l, s)| l - s).collect();
    let mut order: Vec<usize> = (0..reducible.len()).collect();
    order.sort_by(|&a, &b| reducible[b].total_cmp(&reducible[a]).then(a.cmp(&b)));
    let mut top = order[..mini_batch].to_vec();
    top.sort_unstable();
    Ok(top)
}

/// Proxy-model loss for every main-training example, indexed by example id.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyLossTable {
    losses: Vec<f64>,
}

impl ProxyLossTable {
    pub fn from_losses(losses: Vec<f64>) -> Self {
        Self { losses }
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<f64> {
        self.losses.get(id).copied()
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// Errors unless the table has exactly one entry per example `0..n`.
    pub fn check_covers(&self, n: usize) -> Result<()> {
        if self.losses.len() != n {
            return Err(Error::Contract(format!(
                "proxy loss table has {} entries for {n} examples",
                self.losses.len()
            )));
        }
        Ok(())
    }

    /// Two tab-separated columns, `example_id` and `proxy_loss`, after a header line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("example_id\tproxy_loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{l:?}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (lineno == 0 && line.starts_with("example_id")) {
                continue;
            }
            let mut cols = line.split_whitespace();
            let (Some(id), Some(loss), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::Parse(format!("line {}: expected two columns", lineno + 1)));
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad example id {id:?}", lineno + 1)))?;
            let loss: f64 = loss
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad loss {loss:?}", lineno + 1)))?;
            if entries.insert(id, loss).is_some() {
                return Err(Error::Parse(format!("example {id} listed twice")));
            }
        }
        let n = entries.len();
        if entries.keys().copied().ne(0..n) {
            return Err(Error::Contract("proxy loss table ids are not contiguous from 0".into()));
        }
        Ok(Self {
            losses: entries.into_values().collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// One forward pass of the proxy model per example, in chunks of `chunk` rows.
pub fn rho_precompute<S: Scalar>(proxy: &ModelParams<S>, pool: &MaskedBatch, chunk: usize) -> Result<ProxyLossTable> {
    let plan = LayerPlan::all(proxy.num_blocks());
    let mut losses = Vec::with_capacity(pool.batch_size);
    let rows: Vec<usize> = (0..pool.batch_size).collect();
    for ids in rows.chunks(chunk.max(1)) {
        let out = forward_mlm(proxy, &pool.select(ids), &plan)?;
        losses.extend(out.per_example.iter().map(|l| l.as_f64()));
    }
    let table = ProxyLossTable::from_losses(losses);
    table.check_covers(pool.batch_size)?;
    Ok(table)
}
