//! Budgeted training runs for every method, plus calibration and run output.
//!
//! A step is admitted only while the remaining budget covers its full cost.
//! Selection forwards are charged as they happen, so a run overshoots its
//! budget by at most one selection round.

use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::clock::{BudgetClock, CalibrationProfile, ChargeEntry, ProfileDescriptor, StepKind, Workload};
use crate::config::{Method, RunConfig};
use crate::data::{Corpus, MaskedBatch, Vocab, example_pool, fixed_validation_set, sample_masked_batch, split_rho};
use crate::error::{Error, Result};
use crate::model::{LayerPlan, ModelConfig, ModelParams, forward_mlm, init_model, logits, loss_and_grads, stack_model};
use crate::optim::{OptHyper, OptimizerKind, OptimizerState, adamw_step, clip_grad_norm, gnb_estimate, optimizer_step};
use crate::schedule::{drop_keep_probs, lr_at, sample_layer_plan, stacking_points};
use crate::select::{ProxyLossTable, SbAssembler, SelectionMode, rho_precompute, rho_select};

const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_DROP: u64 = 2;
const STREAM_SELECT: u64 = 3;
const STREAM_HESSIAN: u64 = 4;
const PROBE_SALT: u64 = 0x70_726F_6265;
const POOL_SALT: u64 = 0x706F_6F6C;
const PROXY_SALT: u64 = 0x70_726F_7879;
/// Examples per proxy forward pass during precomputation.
const PRECOMPUTE_CHUNK: usize = 32;
/// Timing blocks per calibration point.
const CALIBRATION_BLOCKS: usize = 20;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Step,
    Eval,
}

/// One line of the metrics log. Step records carry the mini-batch loss;
/// eval records carry the fixed train-probe loss and the validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub step: u64,
    pub rst_elapsed: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    pub active_layers: usize,
    pub selected_fraction: f64,
    /// Sampled training tokens over training-slice length.
    pub epoch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackEvent {
    pub step: u64,
    pub rst_elapsed: f64,
    pub from_layers: usize,
    pub to_layers: usize,
    /// Each new block equals its source block bit for bit.
    pub paired_identical: bool,
    /// Max |Δlogit| between the pre-stack model and the stacked model run on
    /// its original blocks only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restricted_logit_diff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChargeTotal {
    pub kind: StepKind,
    pub entries: usize,
    pub zero_charge_entries: usize,
    pub charged: f64,
    pub nominal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxySummary {
    pub layers: usize,
    pub steps: u64,
    pub examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_val_loss: Option<f64>,
    pub loaded_from_table: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub budget: f64,
    pub seed: u64,
    pub steps: u64,
    pub rst_consumed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_val_loss: Option<f64>,
    pub final_lr: f64,
    pub epochs: f64,
    pub final_layers: usize,
    pub charges: Vec<ChargeTotal>,
    pub stack_events: Vec<StackEvent>,
    /// Examples admitted to a mini-batch that never completed.
    pub discarded_examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy: Option<ProxySummary>,
}

impl RunSummary {
    pub fn charge_total(&self, kind: StepKind) -> Option<&ChargeTotal> {
        self.charges.iter().find(|c| c.kind == kind)
    }
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: RunConfig,
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub params: ModelParams<f64>,
    pub state: OptimizerState<f64>,
    pub ledger: Vec<ChargeEntry>,
    pub proxy_table: Option<ProxyLossTable>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Local profile for projecting device seconds; charges are unaffected.
    pub device: Option<CalibrationProfile>,
    /// Precomputed proxy losses; skips proxy training for RHO runs.
    pub proxy_table: Option<ProxyLossTable>,
}

/// Fills in the corpus vocabulary and checks the model fits the corpus.
pub fn resolve_model(model: ModelConfig, vocab: &Vocab) -> Result<ModelConfig> {
    let mut m = model;
    if m.vocab_size == 0 {
        m.vocab_size = vocab.size();
    } else if m.vocab_size < vocab.size() {
        return Err(Error::Config(format!(
            "model vocab {} is smaller than the corpus vocabulary {}",
            m.vocab_size,
            vocab.size()
        )));
    }
    m.validate()?;
    Ok(m)
}

/// Token ranges a run trains and validates on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSplits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    /// Proxy-train and proxy-val ranges of a RHO run.
    pub proxy: Option<(Range<usize>, Range<usize>)>,
}

impl DataSplits {
    /// Validation is the trailing `val_fraction` of the corpus for every
    /// method. RHO further splits the rest into proxy-train, proxy-val and main.
    pub fn new(cfg: &RunConfig, corpus_len: usize) -> Result<Self> {
        let val_len = ((cfg.val_fraction * corpus_len as f64).round() as usize).min(corpus_len);
        let cut = corpus_len - val_len;
        let val = cut..corpus_len;
        let (mut train, proxy) = match &cfg.rho {
            Some(r) => {
                let (pt, pv, main) = split_rho(cut, r.split)?;
                (main, Some((pt, pv)))
            }
            None => (0..cut, None),
        };
        if let Some(n) = cfg.corpus_truncation {
            train.end = train.end.min(train.start + n);
        }
        let s = cfg.model.seq_len;
        if train.len() < s || val.len() < s {
            return Err(Error::Config(format!(
                "train ({}) or validation ({}) slice shorter than seq_len {s}",
                train.len(),
                val.len()
            )));
        }
        debug_assert!(train.end <= val.start);
        Ok(Self { train, val, proxy })
    }
}

fn mean_loss(params: &ModelParams<f64>, set: &[MaskedBatch]) -> Result<Option<f64>> {
    if set.is_empty() {
        return Ok(None);
    }
    let plan = LayerPlan::all(params.num_blocks());
    let (mut total, mut count) = (0.0, 0usize);
    for b in set {
        let out = forward_mlm(params, b, &plan)?;
        let n = b.masked_count();
        total += out.loss * n as f64;
        count += n;
    }
    Ok(Some(total / count as f64))
}

fn check_workload(cfg: &RunConfig, model: &ModelConfig, profile: &CalibrationProfile) -> Result<()> {
    let Some(w) = &profile.descriptor.workload else {
        return Ok(());
    };
    let expected = workload_of(model, cfg.batch_size);
    if *w != expected {
        return Err(Error::Config(format!(
            "profile {:?} was measured on {w:?}, run uses {expected:?}",
            profile.descriptor.label
        )));
    }
    Ok(())
}

pub fn workload_of(model: &ModelConfig, batch_size: usize) -> Workload {
    Workload {
        scalar: "f64".into(),
        batch_size,
        seq_len: model.seq_len,
        d_model: model.d_model,
        n_heads: model.n_heads,
        d_ff: model.d_ff,
        vocab_size: model.vocab_size,
    }
}

fn bitwise_equal(a: &[crate::tensor::Tensor<f64>], b: &[crate::tensor::Tensor<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

/// The fixed example pool and proxy losses of a RHO run.
struct RhoData {
    pool: MaskedBatch,
    table: ProxyLossTable,
}

/// Inputs of one training loop.
struct LoopSetup<'a> {
    cfg: &'a RunConfig,
    model: ModelConfig,
    train: &'a [usize],
    vocab: &'a Vocab,
    val_set: Vec<MaskedBatch>,
    probe_set: Vec<MaskedBatch>,
    rho: Option<&'a RhoData>,
}

struct LoopResult {
    records: Vec<MetricsRecord>,
    params: ModelParams<f64>,
    state: OptimizerState<f64>,
    clock: BudgetClock,
    stack_events: Vec<StackEvent>,
    steps: u64,
    epochs: f64,
    final_lr: f64,
    discarded: usize,
    init_losses: (Option<f64>, Option<f64>),
    final_losses: (Option<f64>, Option<f64>),
}

pub fn run_experiment(cfg: &RunConfig, corpus: &Corpus, reference: &CalibrationProfile) -> Result<RunOutput> {
    run_experiment_with(cfg, corpus, reference, &RunOptions::default())
}

pub fn run_experiment_with(
    cfg: &RunConfig,
    corpus: &Corpus,
    reference: &CalibrationProfile,
    opts: &RunOptions,
) -> Result<RunOutput> {
    cfg.validate()?;
    let model = resolve_model(cfg.model, &corpus.vocab)?;
    check_workload(cfg, &model, reference)?;
    let splits = DataSplits::new(cfg, corpus.len())?;
    let train = corpus.slice(splits.train.clone());
    let (b, s) = (cfg.batch_size, model.seq_len);
    let val_set = fixed_validation_set(
        corpus.slice(splits.val.clone()),
        &corpus.vocab,
        cfg.val_batches,
        b,
        s,
        cfg.mask_rate,
        cfg.eval_seed,
    )?;
    let probe_set = fixed_validation_set(
        train,
        &corpus.vocab,
        cfg.probe_batches,
        b,
        s,
        cfg.mask_rate,
        cfg.eval_seed ^ PROBE_SALT,
    )?;

    let mut proxy_summary = None;
    let rho = match &cfg.rho {
        None => None,
        Some(r) => {
            let pool = example_pool(
                train,
                &corpus.vocab,
                s,
                r.pool_size,
                cfg.mask_rate,
                cfg.seed ^ POOL_SALT,
            )?;
            let supplied = match (&opts.proxy_table, &r.proxy_table) {
                (Some(t), _) => Some(t.clone()),
                (None, Some(path)) => Some(ProxyLossTable::load(path)?),
                (None, None) => None,
            };
            let table = match supplied {
                Some(t) => {
                    proxy_summary = Some(ProxySummary {
                        layers: r.proxy_layers,
                        steps: 0,
                        examples: t.len(),
                        final_val_loss: None,
                        loaded_from_table: true,
                    });
                    t
                }
                None => {
                    let (proxy, summary) = train_proxy(cfg, corpus, &splits, reference)?;
                    let t = rho_precompute(&proxy, &pool, PRECOMPUTE_CHUNK)?;
                    proxy_summary = Some(ProxySummary {
                        examples: t.len(),
                        ..summary
                    });
                    t
                }
            };
            table.check_covers(pool.batch_size)?;
            Some(RhoData { pool, table })
        }
    };

    let mut clock = BudgetClock::new(cfg.budget, reference.clone())?;
    if let Some(dev) = &opts.device {
        clock = clock.with_device(dev.clone())?;
    }
    if cfg.free_selection {
        clock.make_free(StepKind::ForwardOnly);
    }
    if cfg.free_hessian {
        clock.make_free(StepKind::HessianStep);
    }
    let setup = LoopSetup {
        cfg,
        model,
        train,
        vocab: &corpus.vocab,
        val_set,
        probe_set,
        rho: rho.as_ref(),
    };
    let res = train_loop(&setup, clock)?;

    let mut charges: Vec<ChargeTotal> = Vec::new();
    for kind in StepKind::ALL {
        let entries: Vec<&ChargeEntry> = res.clock.ledger().iter().filter(|e| e.kind == kind).collect();
        if entries.is_empty() {
            continue;
        }
        charges.push(ChargeTotal {
            kind,
            entries: entries.len(),
            zero_charge_entries: entries.iter().filter(|e| e.charged == 0.0).count(),
            charged: entries.iter().map(|e| e.charged).sum(),
            nominal: entries.iter().map(|e| e.nominal).sum(),
        });
    }
    let summary = RunSummary {
        method: cfg.method,
        budget: cfg.budget,
        seed: cfg.seed,
        steps: res.steps,
        rst_consumed: res.clock.consumed(),
        init_train_loss: res.init_losses.0,
        init_val_loss: res.init_losses.1,
        final_train_loss: res.final_losses.0,
        final_val_loss: res.final_losses.1,
        final_lr: res.final_lr,
        epochs: res.epochs,
        final_layers: res.params.num_blocks(),
        charges,
        stack_events: res.stack_events,
        discarded_examples: res.discarded,
        device_seconds: res.clock.device_seconds(),
        proxy: proxy_summary,
    };
    Ok(RunOutput {
        config: cfg.clone(),
        records: res.records,
        summary,
        params: res.params,
        state: res.state,
        ledger: res.clock.ledger().to_vec(),
        proxy_table: rho.map(|r| r.table),
    })
}

/// Trains the half-depth proxy on the proxy-train split with its own clock.
fn train_proxy(
    cfg: &RunConfig,
    corpus: &Corpus,
    splits: &DataSplits,
    reference: &CalibrationProfile,
) -> Result<(ModelParams<f64>, ProxySummary)> {
    let r = cfg.rho.as_ref().expect("rho config");
    let (pt, pv) = splits.proxy.clone().expect("rho splits");
    let mut pcfg = RunConfig::preset(Method::Baseline);
    pcfg.budget = cfg.budget * r.proxy_budget_fraction;
    pcfg.seed = cfg.seed ^ PROXY_SALT;
    pcfg.batch_size = cfg.batch_size;
    pcfg.mask_rate = cfg.mask_rate;
    pcfg.model = cfg.model.with_layers(r.proxy_layers);
    pcfg.eval_interval = Some(f64::INFINITY);
    let model = resolve_model(pcfg.model, &corpus.vocab)?;
    let s = model.seq_len;
    let ptrain = corpus.slice(pt);
    let pval = corpus.slice(pv);
    let val_set = if pval.len() >= s {
        fixed_validation_set(
            pval,
            &corpus.vocab,
            cfg.val_batches,
            cfg.batch_size,
            s,
            cfg.mask_rate,
            cfg.eval_seed,
        )?
    } else {
        Vec::new()
    };
    if ptrain.len() < s {
        return Err(Error::Config("proxy-train split shorter than seq_len".into()));
    }
    let setup = LoopSetup {
        cfg: &pcfg,
        model,
        train: ptrain,
        vocab: &corpus.vocab,
        val_set,
        probe_set: Vec::new(),
        rho: None,
    };
    let res = train_loop(&setup, BudgetClock::new(pcfg.budget, reference.clone())?)?;
    Ok((
        res.params,
        ProxySummary {
            layers: r.proxy_layers,
            steps: res.steps,
            examples: 0,
            final_val_loss: res.final_losses.1,
            loaded_from_table: false,
        },
    ))
}

fn train_loop(setup: &LoopSetup<'_>, mut clock: BudgetClock) -> Result<LoopResult> {
    let cfg = setup.cfg;
    let hyper: OptHyper = cfg.hyper();
    let (b, s) = (cfg.batch_size, setup.model.seq_len);
    let mut rng_init = stream(cfg.seed, STREAM_INIT);
    let mut rng_data = stream(cfg.seed, STREAM_DATA);
    let mut rng_drop = stream(cfg.seed, STREAM_DROP);
    let mut rng_select = stream(cfg.seed, STREAM_SELECT);
    let mut rng_hess = stream(cfg.seed, STREAM_HESSIAN);

    let mut params: ModelParams<f64> = init_model(&setup.model.with_layers(cfg.initial_layers()), &mut rng_init)?;
    let mut state = OptimizerState::new(cfg.optimizer.kind, &params.tensors);
    let stack_at = match &cfg.stacking {
        Some(st) => stacking_points(cfg.budget, &st.fractions)?,
        None => Vec::new(),
    };
    let selection = cfg.selection_config();
    let mut assembler: Option<SbAssembler<MaskedBatch>> = selection
        .filter(|sel| sel.mode == SelectionMode::SelectiveBackprop)
        .map(|sel| SbAssembler::new(sel.beta, sel.mini_batch, sel.history));
    let mut ready: VecDeque<Vec<MaskedBatch>> = VecDeque::new();

    let horizon = cfg.budget * cfg.schedule_stretch;
    let sched_progress = |clock: &BudgetClock| -> f64 {
        if horizon > 0.0 {
            (clock.consumed() / horizon).min(1.0)
        } else {
            0.0
        }
    };
    let train_len = setup.train.len() as f64;
    let mut sampled_tokens = 0u64;
    let (mut scored, mut admitted) = (0u64, 0u64);
    let mut records = Vec::new();
    let mut stack_events = Vec::new();
    let mut next_stack = 0usize;
    let eval_every = cfg.eval_every();
    let mut next_eval = eval_every;
    let mut step = 0u64;

    let eval_record =
        |params: &ModelParams<f64>, step: u64, clock: &BudgetClock, lr: f64, epoch: f64| -> Result<MetricsRecord> {
            Ok(MetricsRecord {
                kind: RecordKind::Eval,
                step,
                rst_elapsed: clock.consumed(),
                lr,
                train_loss: mean_loss(params, &setup.probe_set)?,
                val_loss: mean_loss(params, &setup.val_set)?,
                active_layers: params.num_blocks(),
                selected_fraction: 1.0,
                epoch,
            })
        };
    let init = eval_record(&params, 0, &clock, lr_at(&cfg.schedule, 0.0)?, 0.0)?;
    let init_losses = (init.train_loss, init.val_loss);
    records.push(init);

    loop {
        while next_stack < stack_at.len() && clock.consumed() >= stack_at[next_stack] {
            let probe = setup.probe_set.first();
            let before = probe
                .map(|p| logits(&params, p, &LayerPlan::all(params.num_blocks())))
                .transpose()?;
            let n = params.num_blocks();
            let (p2, s2) = stack_model(&params, &state);
            let paired_identical = (0..n).all(|i| bitwise_equal(&p2.tensors.blocks[i], &p2.tensors.blocks[i + n]));
            let restricted_logit_diff = match (probe, before) {
                (Some(p), Some(before)) => {
                    let keep = (0..2 * n).map(|i| i < n).collect();
                    let after = logits(&p2, p, &LayerPlan::from_keep(keep))?;
                    Some(
                        before
                            .data()
                            .iter()
                            .zip(after.data())
                            .map(|(x, y)| (x - y).abs())
                            .fold(0.0, f64::max),
                    )
                }
                _ => None,
            };
            stack_events.push(StackEvent {
                step,
                rst_elapsed: clock.consumed(),
                from_layers: n,
                to_layers: 2 * n,
                paired_identical,
                restricted_logit_diff,
            });
            params = p2;
            state = s2;
            next_stack += 1;
        }
        if clock.budget() == 0.0 || clock.exhausted() {
            break;
        }
        let progress = sched_progress(&clock);
        let depth = params.num_blocks();
        let plan = match &cfg.dropping {
            Some(d) => sample_layer_plan(&drop_keep_probs(d, depth, progress), &mut rng_drop),
            None => LayerPlan::all(depth),
        };
        let active = plan.active();
        let hessian_due = state.kind == OptimizerKind::Sophia && state.hessian_due(hyper.hessian_interval);

        let (batch, selected_fraction) = match selection {
            None => {
                sampled_tokens += (b * s) as u64;
                (
                    sample_masked_batch(setup.train, setup.vocab, b, s, cfg.mask_rate, &mut rng_data)?,
                    1.0,
                )
            }
            Some(sel) => {
                let full_plan = LayerPlan::all(depth);
                let multiplier = sel.mega_batch as f64 / sel.mini_batch as f64;
                match sel.mode {
                    SelectionMode::SelectiveBackprop => {
                        let asm = assembler.as_mut().expect("selective backprop assembler");
                        while ready.is_empty() && !clock.exhausted() {
                            let mega = sample_masked_batch(
                                setup.train,
                                setup.vocab,
                                sel.mega_batch,
                                s,
                                cfg.mask_rate,
                                &mut rng_data,
                            )?;
                            sampled_tokens += (sel.mega_batch * s) as u64;
                            let out = forward_mlm(&params, &mega, &full_plan)?;
                            clock.charge_scaled(step + 1, StepKind::ForwardOnly, depth, multiplier);
                            scored += sel.mega_batch as u64;
                            let rows = (0..sel.mega_batch).map(|i| (mega.select(&[i]), out.per_example[i]));
                            let done = asm.offer(rows, &mut rng_select);
                            admitted += (done.len() * sel.mini_batch) as u64;
                            ready.extend(done);
                        }
                        let Some(parts) = ready.pop_front() else { break };
                        (MaskedBatch::concat(&parts)?, admitted as f64 / scored.max(1) as f64)
                    }
                    SelectionMode::Rho => {
                        let rho = setup.rho.expect("rho data");
                        let ids: Vec<usize> = (0..sel.mega_batch)
                            .map(|_| rng_data.random_range(0..rho.pool.batch_size))
                            .collect();
                        let mega = rho.pool.select(&ids);
                        sampled_tokens += (sel.mega_batch * s) as u64;
                        let out = forward_mlm(&params, &mega, &full_plan)?;
                        clock.charge_scaled(step + 1, StepKind::ForwardOnly, depth, multiplier);
                        let proxy: Vec<f64> = ids.iter().map(|&i| rho.table.get(i).expect("covered table")).collect();
                        let picked = rho_select(&out.per_example, &proxy, sel.mini_batch)?;
                        (mega.select(&picked), sel.mini_batch as f64 / sel.mega_batch as f64)
                    }
                }
            }
        };

        let mut need = clock.cost(StepKind::FullStep, active);
        if hessian_due && !clock.is_free(StepKind::HessianStep) {
            need += clock.cost(StepKind::HessianStep, depth);
        }
        if clock.remaining() < need {
            if selection.is_some_and(|s| s.mode == SelectionMode::SelectiveBackprop) {
                ready.push_front(vec![batch]);
            }
            break;
        }

        let (out, mut grads) = loss_and_grads(&params, &batch, &plan)?;
        if !out.loss.is_finite() {
            return Err(Error::NumericInstability {
                step: step + 1,
                detail: format!("training loss {}", out.loss),
            });
        }
        if let Some(c) = hyper.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = lr_at(&cfg.schedule, progress)?;
        let fresh = if hessian_due {
            Some(gnb_estimate(&params, &batch, &mut rng_hess)?)
        } else {
            None
        };
        optimizer_step(&mut state, &mut params.tensors, &grads, &hyper, lr, fresh.as_ref())?;
        if !params.all_finite() {
            return Err(Error::NumericInstability {
                step: step + 1,
                detail: "non-finite parameters after update".into(),
            });
        }
        step += 1;
        clock.charge(step, StepKind::FullStep, active);
        if hessian_due {
            clock.charge(step, StepKind::HessianStep, depth);
        }
        let epoch = sampled_tokens as f64 / train_len;
        records.push(MetricsRecord {
            kind: RecordKind::Step,
            step,
            rst_elapsed: clock.consumed(),
            lr,
            train_loss: Some(out.loss),
            val_loss: None,
            active_layers: active,
            selected_fraction,
            epoch,
        });
        while next_eval < cfg.budget && clock.consumed() >= next_eval {
            records.push(eval_record(
                &params,
                step,
                &clock,
                lr_at(&cfg.schedule, sched_progress(&clock))?,
                epoch,
            )?);
            next_eval += eval_every;
        }
    }

    let discarded =
        ready.iter().map(|p| p.len()).sum::<usize>() + assembler.as_mut().map_or(0, |a| a.discard_pending());
    let epochs = sampled_tokens as f64 / train_len;
    let final_lr = lr_at(&cfg.schedule, sched_progress(&clock))?;
    let last = eval_record(&params, step, &clock, final_lr, epochs)?;
    let final_losses = (last.train_loss, last.val_loss);
    records.push(last);
    Ok(LoopResult {
        records,
        params,
        state,
        clock,
        stack_events,
        steps: step,
        epochs,
        final_lr,
        discarded,
        init_losses,
        final_losses,
    })
}

/// Regime comparison at one budget: a schedule fully decayed at `T` against
/// the same run with its schedule stretched to `2T`, both stopped at `T`.
#[derive(Clone, Debug)]
pub struct PitfallOutcome {
    pub decayed: RunOutput,
    pub stretched: RunOutput,
}

impl PitfallOutcome {
    pub fn decayed_wins(&self) -> bool {
        match (
            self.decayed.summary.final_train_loss,
            self.stretched.summary.final_train_loss,
        ) {
            (Some(d), Some(s)) => d < s,
            _ => false,
        }
    }
}

/// Smallest train-probe set for the pitfall comparison. The two final losses
/// are close, and a few probe batches put their gap inside evaluation noise.
pub const PITFALL_PROBE_BATCHES: usize = 64;

/// Runs both schedules; the train probe is raised to [`PITFALL_PROBE_BATCHES`].
pub fn pitfall_demo(base: &RunConfig, corpus: &Corpus, reference: &CalibrationProfile) -> Result<PitfallOutcome> {
    if base.method != Method::Baseline {
        return Err(Error::Config("the pitfall comparison runs the baseline method".into()));
    }
    let base = RunConfig {
        probe_batches: base.probe_batches.max(PITFALL_PROBE_BATCHES),
        ..base.clone()
    };
    let decayed_cfg = RunConfig {
        schedule_stretch: 1.0,
        ..base.clone()
    };
    let stretched_cfg = RunConfig {
        schedule_stretch: 2.0,
        ..base
    };
    Ok(PitfallOutcome {
        decayed: run_experiment(&decayed_cfg, corpus, reference)?,
        stretched: run_experiment(&stretched_cfg, corpus, reference)?,
    })
}

/// Times one unit of `kind` work at every layer count and fits the cost model.
/// A Hessian refresh is priced as a full step unless a profile overrides it.
pub fn calibrate(
    model: &ModelConfig,
    batch_size: usize,
    layer_counts: &[usize],
    n_iters: usize,
    warmup_iters: usize,
    label: &str,
) -> Result<CalibrationProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xCA11);
    let text: String = (0..model.seq_len * batch_size * 4)
        .map(|_| (b'a' + rng.random_range(0..26u8)) as char)
        .collect();
    let corpus = Corpus::from_text(&text)?;
    let model = resolve_model(
        ModelConfig {
            vocab_size: model.vocab_size.max(corpus.vocab.size()),
            ..*model
        },
        &corpus.vocab,
    )?;
    let batch = sample_masked_batch(&corpus.tokens, &corpus.vocab, batch_size, model.seq_len, 0.15, &mut rng)?;
    let hyper = OptHyper::adamw();
    let descriptor = ProfileDescriptor {
        label: label.into(),
        workload: Some(workload_of(&model, batch_size)),
    };
    struct Point {
        kind: StepKind,
        layers: usize,
        params: ModelParams<f64>,
        state: OptimizerState<f64>,
        blocks: Vec<f64>,
    }
    let mut points = Vec::new();
    for kind in [StepKind::FullStep, StepKind::ForwardOnly] {
        for &layers in layer_counts {
            let params: ModelParams<f64> = init_model(&model.with_layers(layers), &mut rng)?;
            let state = OptimizerState::new(OptimizerKind::Adamw, &params.tensors);
            points.push(Point {
                kind,
                layers,
                params,
                state,
                blocks: Vec::new(),
            });
        }
    }
    let run = |p: &mut Point, n: usize| -> Result<f64> {
        let plan = LayerPlan::all(p.layers);
        let t = Instant::now();
        for _ in 0..n {
            if p.kind == StepKind::ForwardOnly {
                forward_mlm(&p.params, &batch, &plan)?;
            } else {
                let (_, mut g) = loss_and_grads(&p.params, &batch, &plan)?;
                clip_grad_norm(&mut g, 0.5);
                adamw_step(&mut p.state, &mut p.params.tensors, &g, &hyper, 1e-4)?;
            }
        }
        Ok(t.elapsed().as_secs_f64() / n as f64)
    };
    for p in points.iter_mut() {
        run(p, warmup_iters.max(1))?;
    }
    // Blocks are interleaved across points so slow spells hit every point
    // alike. The median block is the estimate: it tracks a typical step,
    // where the fastest block would undercharge every real run.
    let block = n_iters.div_ceil(CALIBRATION_BLOCKS).max(1);
    let mut left = n_iters;
    while left > 0 {
        let n = block.min(left);
        for p in points.iter_mut() {
            let t = run(p, n)?;
            p.blocks.push(t);
        }
        left -= n;
    }
    crate::clock::calibrate(descriptor, layer_counts, n_iters, false, |kind, layers| {
        let p = points
            .iter()
            .find(|p| p.kind == kind && p.layers == layers)
            .ok_or(Error::UnknownStepKind(kind))?;
        let mut b = p.blocks.clone();
        b.sort_by(f64::total_cmp);
        let median = b.get(b.len() / 2).copied().unwrap_or(f64::NAN);
        if !median.is_finite() {
            return Err(Error::Calibration(format!(
                "non-finite timing for {kind} at {layers} layers"
            )));
        }
        Ok(median)
    })
}

/// Files written into a run directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const METRICS: &str = "metrics.jsonl";
    pub const SUMMARY: &str = "summary.json";
    pub const LEDGER: &str = "ledger.jsonl";
    pub const CHECKPOINT: &str = "checkpoint.bin";
    pub const PROXY_TABLE: &str = "proxy_losses.tsv";
    pub const PLOT: &str = "plot.csv";
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Parse(e.to_string())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r).map_err(json_err)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(json_err))
        .collect()
}

pub fn read_summary(run_dir: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(run_dir.join(files::SUMMARY))?;
    serde_json::from_str(&text).map_err(json_err)
}

/// Writes a run under `root/method_budget_seed`. Refuses to touch an existing
/// directory unless `force`.
pub fn write_run_dir(out: &RunOutput, root: &Path, force: bool) -> Result<PathBuf> {
    let dir = root.join(out.config.run_name());
    if dir.exists() {
        if !force {
            return Err(Error::Config(format!(
                "run directory {} exists; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(files::CONFIG), out.config.with_absolute_paths()?.to_toml()?)?;
    write_jsonl(&dir.join(files::METRICS), &out.records)?;
    write_jsonl(&dir.join(files::LEDGER), &out.ledger)?;
    fs::write(
        dir.join(files::SUMMARY),
        serde_json::to_string_pretty(&out.summary).map_err(json_err)?,
    )?;
    Checkpoint {
        params: out.params.clone(),
        state: out.state.clone(),
        rst_consumed: out.summary.rst_consumed,
    }
    .save(dir.join(files::CHECKPOINT))?;
    if let Some(t) = &out.proxy_table {
        t.save(dir.join(files::PROXY_TABLE))?;
    }
    Ok(dir)
}
