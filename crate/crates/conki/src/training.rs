//! Two-stage training: adapter pretraining on an external dataset with the
//! regression loss only, then downstream fine-tuning under regression plus
//! weighted contrastive loss, with exact per-stage freezing.
//!
//! Stage 1 updates everything except the backbones. Stage 2 updates
//! everything except the adapters (and optionally the text backbone).
//! Model selection is best validation MAE; the stage runner leaves the model
//! at the selected parameters.

use crate::checkpoint;
use crate::config::RunConfig;
use crate::contrastive::{build_pairs_over, contrastive_loss_node};
use crate::data::{round_to_interval, Dataset, MultimodalSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{ConkiModel, DataDims, SampleForward, Variant};
use crate::nn::ParamStore;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Everything the stage runner needs beyond the shared config.
#[derive(Clone, Copy, Debug)]
pub struct StageOptions {
    pub stage: Stage,
    pub epochs: usize,
    /// Contrastive weight; stage 1 always runs with the task loss alone.
    pub lambda: f64,
    /// Keep inter-knowledge negatives in the contrastive normalizer.
    pub include_n1: bool,
    /// Freeze `adapter.*`; set when adapters were loaded from a checkpoint.
    pub freeze_adapters: bool,
}

impl StageOptions {
    pub fn stage1(cfg: &RunConfig) -> Self {
        StageOptions {
            stage: Stage::One,
            epochs: cfg.training.epochs_stage1,
            lambda: 0.0,
            include_n1: true,
            freeze_adapters: false,
        }
    }

    pub fn stage2(cfg: &RunConfig) -> Self {
        StageOptions {
            stage: Stage::Two,
            epochs: cfg.training.epochs_stage2,
            lambda: cfg.training.lambda,
            include_n1: true,
            freeze_adapters: true,
        }
    }
}

/// Per-stage trainability of a named parameter.
pub fn is_trainable(name: &str, cfg: &RunConfig, opts: &StageOptions) -> bool {
    for (prefix, b) in [
        ("backbone.text.", &cfg.backbone.text),
        ("backbone.vision.", &cfg.backbone.vision),
        ("backbone.audio.", &cfg.backbone.audio),
    ] {
        if name.starts_with(prefix) && b.freeze {
            return false;
        }
    }
    match opts.stage {
        Stage::One => !name.starts_with("backbone."),
        Stage::Two => {
            if name.starts_with("adapter.") {
                !opts.freeze_adapters
            } else if name.starts_with("backbone.text.") {
                cfg.training.train_text_backbone_stage2
            } else {
                true
            }
        }
    }
}

/// Number of scalar parameters the given stage would update.
pub fn count_trainable_params(store: &ParamStore, cfg: &RunConfig, opts: &StageOptions) -> usize {
    store.scalar_count(|name| is_trainable(name, cfg, opts))
}

/// Mean squared error over a batch.
pub fn task_loss(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "task loss over {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - y) * (p - y))
        .sum::<f64>()
        / preds.len() as f64)
}

/// Combined objective `task + lambda * con`.
pub fn total_loss(task: f64, con: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("lambda {lambda} must be >= 0")));
    }
    Ok(task + lambda * con)
}

/// Graph twin of [`task_loss`] over per-sample scalar prediction nodes.
pub fn task_loss_node(g: &mut Graph, preds: &[NodeId], labels: &[f64]) -> Result<NodeId> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::InvalidInput("empty or mismatched batch".into()));
    }
    let mut acc: Option<NodeId> = None;
    for (&p, &y) in preds.iter().zip(labels) {
        let diff = g.add_const(p, -y);
        let sq = g.mul(diff, diff)?;
        acc = Some(match acc {
            None => sq,
            Some(a) => g.add(a, sq)?,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / preds.len() as f64))
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.rows(), e.tensor.cols()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One decoupled-weight-decay Adam step over the trainable subset.
    fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        trainable: &[bool],
        lr_of: impl Fn(&str) -> f64,
        lr_mult: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..store.len() {
            if !trainable[i] {
                continue;
            }
            let lr = lr_of(store.name(crate::nn::ParamId(i))) * lr_mult;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.get_mut(crate::nn::ParamId(i));
            let zero;
            let grad = match &grads[i] {
                Some(gt) => gt,
                None => {
                    zero = Tensor::zeros(p.rows(), p.cols());
                    &zero
                }
            };
            for k in 0..p.len() {
                let gk = grad.data()[k];
                let mk = ADAM_BETA1 * m.data()[k] + (1.0 - ADAM_BETA1) * gk;
                let vk = ADAM_BETA2 * v.data()[k] + (1.0 - ADAM_BETA2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let update = (mk / bc1) / ((vk / bc2).sqrt() + ADAM_EPS);
                let pk = p.data()[k];
                p.data_mut()[k] = pk - lr * (update + weight_decay * pk);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<MetricsReport>,
}

pub struct StageOutcome {
    pub log: Vec<EpochLog>,
    pub best_val_mae: f64,
}

/// Evaluate predictions of `model` on `samples`.
pub fn evaluate(model: &ConkiModel, dataset: &Dataset, samples: &[MultimodalSample]) -> Result<MetricsReport> {
    let preds = model.predict(samples)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    compute_metrics(&preds, &labels, dataset.meta.label_range)
}

/// Run one training stage in place. On return the model holds the best
/// validation-MAE parameters seen (the final ones if no validation split).
pub fn train_stage(
    model: &mut ConkiModel,
    data: &Dataset,
    cfg: &RunConfig,
    opts: &StageOptions,
) -> Result<StageOutcome> {
    if data.train.is_empty() {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }
    let trainable: Vec<bool> = model
        .store
        .entries()
        .iter()
        .map(|e| is_trainable(&e.name, cfg, opts))
        .collect();
    let lr_of = |name: &str| {
        if name.starts_with("backbone.") {
            cfg.training.lr_encoders
        } else {
            cfg.training.lr_other
        }
    };

    let batch_size = cfg.training.batch_size;
    let batches_per_epoch = data.train.len().div_ceil(batch_size);
    let warmup_steps = match opts.stage {
        Stage::One => cfg.training.warmup_epochs * batches_per_epoch,
        Stage::Two => 0,
    };

    let mut adam = Adam::new(&model.store);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut log = Vec::with_capacity(opts.epochs);
    let mut global_step = 0usize;

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = stream(
            cfg.training.seed,
            Stream::Shuffle {
                stage: opts.stage.number(),
                epoch: epoch as u64,
            },
        );
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&MultimodalSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let labels: Vec<f64> = batch.iter().map(|s| s.label).collect();

            let mut g = Graph::new();
            let params = model.store.leaves(&mut g);
            let mut preds = Vec::with_capacity(batch.len());
            let mut outs: Vec<SampleForward> = Vec::with_capacity(batch.len());
            for s in &batch {
                let out = model.forward_sample(&mut g, &params, s)?;
                preds.push(out.y_hat);
                outs.push(out);
            }
            let task = task_loss_node(&mut g, &preds, &labels)?;
            let total = if opts.lambda > 0.0 {
                let partition =
                    build_pairs_over(&labels, data.meta.label_range, model.knowledge_set())?;
                let rep_nodes = ConkiModel::batch_rep_nodes(&outs);
                let con = contrastive_loss_node(
                    &mut g,
                    &rep_nodes,
                    &partition,
                    cfg.training.tau,
                    opts.include_n1,
                )?;
                let weighted = g.scale(con, opts.lambda);
                g.add(task, weighted)?
            } else {
                task
            };

            let loss_value = g.value(total).item();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "stage {} epoch {epoch} step {global_step}: loss {loss_value}",
                    opts.stage.number()
                )));
            }
            loss_sum += loss_value;

            let grads = g.backward(total)?;
            let lr_mult = if warmup_steps > 0 && global_step < warmup_steps {
                (global_step + 1) as f64 / warmup_steps as f64
            } else {
                1.0
            };
            let param_grads: Vec<Option<Tensor>> = params
                .iter()
                .map(|&id| grads[id.0].clone())
                .collect();
            adam.step(
                &mut model.store,
                &param_grads,
                &trainable,
                lr_of,
                lr_mult,
                cfg.training.weight_decay,
            );
            global_step += 1;
        }

        let train_loss = loss_sum / batches_per_epoch as f64;
        let val = if data.valid.is_empty() {
            None
        } else {
            Some(evaluate(model, data, &data.valid)?)
        };
        if let Some(report) = &val {
            if best.as_ref().is_none_or(|(mae, _)| report.mae < *mae) {
                best = Some((report.mae, model.store.clone()));
            }
        }
        log.push(EpochLog {
            stage: opts.stage.number(),
            epoch,
            train_loss,
            val,
        });
    }

    let best_val_mae = match best {
        Some((mae, state)) => {
            model.store = state;
            mae
        }
        None => f64::NAN,
    };
    Ok(StageOutcome { log, best_val_mae })
}

pub struct PretrainOutcome {
    pub model: ConkiModel,
    pub log: Vec<EpochLog>,
    pub best_val_mae: f64,
}

/// Replace seed-initialized backbone weights with checkpoint records; the
/// pluggable-backbone hook for externally pretrained stand-ins. Only
/// `backbone.*` records are consulted and none are required.
pub fn apply_backbone_checkpoint(
    model: &mut ConkiModel,
    records: &[(String, Tensor)],
) -> Result<()> {
    let backbone_only: Vec<(String, Tensor)> = records
        .iter()
        .filter(|(n, _)| n.starts_with("backbone."))
        .cloned()
        .collect();
    if backbone_only.is_empty() {
        return Err(Error::Checkpoint(
            "checkpoint holds no backbone parameters".into(),
        ));
    }
    checkpoint::apply_records(&mut model.store, &backbone_only, None)
}

/// Stage 1: pretrain adapters (plus fusion and head) on the external dataset
/// with the task loss, backbones frozen. The returned model holds the best
/// validation state.
pub fn pretrain_adapters(cfg: &RunConfig, external: &Dataset) -> Result<PretrainOutcome> {
    pretrain_adapters_from(cfg, external, None)
}

/// [`pretrain_adapters`] with optional backbone weights from a checkpoint.
pub fn pretrain_adapters_from(
    cfg: &RunConfig,
    external: &Dataset,
    backbone_records: Option<&[(String, Tensor)]>,
) -> Result<PretrainOutcome> {
    let dims = DataDims::of(&external.meta);
    let mut model = ConkiModel::build(cfg, &dims, cfg.training.seed, Variant::FULL)?;
    if let Some(records) = backbone_records {
        apply_backbone_checkpoint(&mut model, records)?;
    }
    let opts = StageOptions::stage1(cfg);
    let outcome = train_stage(&mut model, external, cfg, &opts)?;
    Ok(PretrainOutcome {
        model,
        log: outcome.log,
        best_val_mae: outcome.best_val_mae,
    })
}

pub struct FinetuneOutcome {
    pub model: ConkiModel,
    pub log: Vec<EpochLog>,
    pub best_val_mae: f64,
    pub report: MetricsReport,
}

/// Stage 2: load pretrained adapters into a fresh seed-built model, freeze
/// them, fine-tune everything else on the target dataset under the combined
/// objective, and report test metrics at the best validation state.
pub fn finetune(
    cfg: &RunConfig,
    target: &Dataset,
    adapter_records: &[(String, Tensor)],
) -> Result<FinetuneOutcome> {
    finetune_from(cfg, target, adapter_records, None)
}

/// [`finetune`] with optional backbone weights from a checkpoint; pass the
/// same records given to stage 1 so both stages share one backbone.
pub fn finetune_from(
    cfg: &RunConfig,
    target: &Dataset,
    adapter_records: &[(String, Tensor)],
    backbone_records: Option<&[(String, Tensor)]>,
) -> Result<FinetuneOutcome> {
    let dims = DataDims::of(&target.meta);
    let mut model = ConkiModel::build(cfg, &dims, cfg.training.seed, Variant::FULL)?;
    if let Some(records) = backbone_records {
        apply_backbone_checkpoint(&mut model, records)?;
    }
    let adapters_only: Vec<(String, Tensor)> = adapter_records
        .iter()
        .filter(|(n, _)| n.starts_with("adapter."))
        .cloned()
        .collect();
    checkpoint::apply_records(&mut model.store, &adapters_only, Some("adapter."))?;
    let opts = StageOptions::stage2(cfg);
    let outcome = train_stage(&mut model, target, cfg, &opts)?;
    let report = evaluate(&model, target, &target.test)?;
    Ok(FinetuneOutcome {
        model,
        log: outcome.log,
        best_val_mae: outcome.best_val_mae,
        report,
    })
}

/// Ablation switches mirroring the component study: external dataset (c1),
/// adapters (c2), pan encoders (c3), contrastive subtask (c4), and the
/// inter-knowledge negatives (n1).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AblationSwitches {
    pub no_external: bool,
    pub no_adapters: bool,
    pub no_pan: bool,
    pub no_cl: bool,
    pub no_n1: bool,
}

impl AblationSwitches {
    pub fn parse(list: &str) -> Result<Self> {
        let mut s = AblationSwitches::default();
        for item in list.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            match item {
                "c1" | "no-external" => s.no_external = true,
                "c2" | "no-adapters" => s.no_adapters = true,
                "c3" | "no-pan" => s.no_pan = true,
                "c4" | "no-cl" => s.no_cl = true,
                "n1" | "no-n1" => s.no_n1 = true,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown ablation switch {other:?}"
                    )))
                }
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.no_adapters && self.no_pan {
            return Err(Error::InvalidConfig(
                "no-adapters and no-pan together leave no representation path".into(),
            ));
        }
        Ok(())
    }
}

pub struct AblateOutcome {
    pub model: ConkiModel,
    pub log: Vec<EpochLog>,
    pub report: MetricsReport,
}

/// Run an ablated variant end-to-end. Stage 1 runs only when adapters exist
/// and an external dataset is in play; without it, adapters (if any) train
/// during the single downstream stage instead of being frozen at random
/// initialization.
pub fn ablate(
    cfg: &RunConfig,
    switches: &AblationSwitches,
    target: &Dataset,
    external: Option<&Dataset>,
) -> Result<AblateOutcome> {
    ablate_from(cfg, switches, target, external, None)
}

/// [`ablate`] with optional backbone weights from a checkpoint, applied to
/// every stage's model.
pub fn ablate_from(
    cfg: &RunConfig,
    switches: &AblationSwitches,
    target: &Dataset,
    external: Option<&Dataset>,
    backbone_records: Option<&[(String, Tensor)]>,
) -> Result<AblateOutcome> {
    switches.validate()?;
    let variant = Variant {
        use_pan: !switches.no_pan,
        use_adapters: !switches.no_adapters,
    };
    let lambda = if switches.no_cl { 0.0 } else { cfg.training.lambda };
    let include_n1 = !switches.no_n1;
    let dims = DataDims::of(&target.meta);

    let run_stage1 = variant.use_adapters && !switches.no_external;
    let mut log = Vec::new();
    let mut model = ConkiModel::build(cfg, &dims, cfg.training.seed, variant)?;
    if let Some(records) = backbone_records {
        apply_backbone_checkpoint(&mut model, records)?;
    }
    if run_stage1 {
        let external = external.ok_or_else(|| {
            Error::InvalidConfig("this ablation requires an external dataset".into())
        })?;
        let ext_dims = DataDims::of(&external.meta);
        if ext_dims != dims {
            return Err(Error::InvalidConfig(
                "external and target datasets must share dims and vocab".into(),
            ));
        }
        let opts = StageOptions {
            stage: Stage::One,
            epochs: cfg.training.epochs_stage1,
            lambda: 0.0,
            include_n1: true,
            freeze_adapters: false,
        };
        let mut stage1_model = ConkiModel::build(cfg, &ext_dims, cfg.training.seed, variant)?;
        if let Some(records) = backbone_records {
            apply_backbone_checkpoint(&mut stage1_model, records)?;
        }
        let outcome = train_stage(&mut stage1_model, external, cfg, &opts)?;
        log.extend(outcome.log);
        // Carry the pretrained adapters over, exactly as the CLI pipeline does.
        let records: Vec<(String, Tensor)> = stage1_model
            .store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("adapter."))
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect();
        checkpoint::apply_records(&mut model.store, &records, Some("adapter."))?;
    }

    let opts = StageOptions {
        stage: Stage::Two,
        epochs: cfg.training.epochs_stage2,
        lambda,
        include_n1,
        freeze_adapters: run_stage1,
    };
    let outcome = train_stage(&mut model, target, cfg, &opts)?;
    log.extend(outcome.log);
    let report = evaluate(&model, target, &target.test)?;
    Ok(AblateOutcome { model, log, report })
}

/// Write the epoch log as JSON lines.
pub fn write_log(path: &Path, log: &[EpochLog], config_hash: &str) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(
        &serde_json::json!({ "config_hash": config_hash }),
    )?);
    out.push('\n');
    for entry in log {
        out.push_str(&serde_json::to_string(entry)?);
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Dump the per-sample representations of a split for external analysis:
/// `manifest.json` plus `reps.bin` of little-endian f64 vectors, one block of
/// named vectors per sample in manifest order.
pub fn dump_representations(
    model: &ConkiModel,
    dataset: &Dataset,
    samples: &[MultimodalSample],
    dir: &Path,
) -> Result<()> {
    let names: Vec<&str> = {
        let mut v = Vec::new();
        if model.variant.use_pan {
            v.extend(["o_t", "o_v", "o_a"]);
        }
        if model.variant.use_adapters {
            v.extend(["a_t", "a_v", "a_a"]);
        }
        v
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes: Vec<u8> = Vec::new();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let mut g = Graph::new();
        let params = model.store.leaves(&mut g);
        let out = model.forward_sample(&mut g, &params, s)?;
        let offset = bytes.len() as u64;
        let mut banks: Vec<NodeId> = Vec::new();
        if let Some(pan) = out.pan {
            banks.extend(pan);
        }
        if let Some(specific) = out.specific {
            banks.extend(specific);
        }
        for node in banks {
            for v in g.value(node).data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        records.push(serde_json::json!({
            "sample_id": s.sample_id,
            "interval": round_to_interval(s.label, dataset.meta.label_range)?.value(),
            "offset": offset,
        }));
    }
    let manifest = serde_json::json!({
        "format_version": 1,
        "d_repr": model.d_repr,
        "dtype": "f64_le",
        "vector_names": names,
        "records": records,
    });
    let manifest_path = dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
    .map_err(|e| Error::io(&manifest_path, e))?;
    let bin_path = dir.join("reps.bin");
    std::fs::write(&bin_path, &bytes).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, GeneratorConfig};

    pub(crate) fn tiny_run_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        for b in [
            &mut cfg.backbone.text,
            &mut cfg.backbone.vision,
            &mut cfg.backbone.audio,
        ] {
            b.num_layers = 2;
            b.d_model = 16;
            b.heads = 2;
            b.d_ff = 24;
            b.d_repr = 16;
            b.max_seq_len = 32;
        }
        for a in [
            &mut cfg.adapter.text,
            &mut cfg.adapter.vision,
            &mut cfg.adapter.audio,
        ] {
            a.insertion_points = vec![1];
            a.d_adapter = 8;
            a.d_repr = 16;
            a.heads = 2;
            a.d_ff = 16;
        }
        cfg.adapter.text.insertion_points = vec![1, 2];
        cfg.fusion.d_fuse = 16;
        cfg.fusion.d_joint = 16;
        cfg.fusion.head_hidden = 16;
        cfg.training.batch_size = 8;
        cfg.training.epochs_stage1 = 2;
        cfg.training.epochs_stage2 = 2;
        cfg.generator.n_train = 16;
        cfg.generator.n_valid = 8;
        cfg.generator.n_test = 8;
        cfg
    }

    fn tiny_data(seed: u64) -> Dataset {
        generate_synthetic_dataset(&GeneratorConfig {
            n_train: 16,
            n_valid: 8,
            n_test: 8,
            seed,
            sigma: 0.2,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn task_and_total_loss_values() {
        assert_eq!(task_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(task_loss(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(task_loss(&[], &[]).is_err());
        assert_eq!(total_loss(0.5, 2.0, 0.01).unwrap(), 0.52);
        assert_eq!(total_loss(0.7, 5.0, 0.0).unwrap(), 0.7);
        assert!(total_loss(0.5, 1.0, -0.1).is_err());
        // Linearity in the contrastive term at fixed task loss.
        let t = 0.3;
        let a = total_loss(t, 1.0, 0.2).unwrap();
        let b = total_loss(t, 2.0, 0.2).unwrap();
        let c = total_loss(t, 3.0, 0.2).unwrap();
        assert!((c - b - (b - a)).abs() < 1e-15);
    }

    #[test]
    fn task_loss_gradient_matches_finite_difference() {
        let labels = [0.4, -1.0, 2.0];
        let preds = [0.1, 0.3, -0.5];
        let eval = |p: &[f64]| -> f64 { task_loss(p, &labels).unwrap() };
        for k in 0..3 {
            let h = 1e-7;
            let mut plus = preds.to_vec();
            plus[k] += h;
            let mut minus = preds.to_vec();
            minus[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = 2.0 * (preds[k] - labels[k]) / 3.0;
            assert!((fd - analytic).abs() / analytic.abs().max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn stage_freezing_counts() {
        let cfg = tiny_run_config();
        let dims = DataDims {
            vocab_size: 64,
            d_v: 8,
            d_a: 8,
        };
        let model = ConkiModel::build(&cfg, &dims, 0, Variant::FULL).unwrap();
        let s1 = StageOptions::stage1(&cfg);
        let s2 = StageOptions::stage2(&cfg);

        let backbone_trainable_s1 = model
            .store
            .scalar_count(|n| n.starts_with("backbone.") && is_trainable(n, &cfg, &s1));
        assert_eq!(backbone_trainable_s1, 0);

        let adapter_trainable_s2 = model
            .store
            .scalar_count(|n| n.starts_with("adapter.") && is_trainable(n, &cfg, &s2));
        assert_eq!(adapter_trainable_s2, 0);

        assert!(count_trainable_params(&model.store, &cfg, &s1) > 0);
        assert!(count_trainable_params(&model.store, &cfg, &s2) > 0);

        // Adapters stay small next to the backbones they plug into.
        let adapter_params = model.store.scalar_count(|n| n.starts_with("adapter."));
        let backbone_params = model.store.scalar_count(|n| n.starts_with("backbone."));
        assert!(adapter_params < backbone_params);
    }

    #[test]
    fn default_config_keeps_adapters_smaller_than_backbones() {
        let cfg = RunConfig::default();
        let dims = DataDims {
            vocab_size: cfg.generator.vocab_size,
            d_v: cfg.generator.d_v,
            d_a: cfg.generator.d_a,
        };
        let model = ConkiModel::build(&cfg, &dims, 0, Variant::FULL).unwrap();
        let adapter_params = model.store.scalar_count(|n| n.starts_with("adapter."));
        let backbone_params = model.store.scalar_count(|n| n.starts_with("backbone."));
        assert!(
            adapter_params < backbone_params,
            "{adapter_params} adapter vs {backbone_params} backbone parameters"
        );
    }

    #[test]
    fn stage1_freezes_backbones_bit_exactly() {
        let cfg = tiny_run_config();
        let data = tiny_data(31);
        let before = ConkiModel::build(
            &cfg,
            &DataDims::of(&data.meta),
            cfg.training.seed,
            Variant::FULL,
        )
        .unwrap()
        .store
        .digest(|n| n.starts_with("backbone."));
        let outcome = pretrain_adapters(&cfg, &data).unwrap();
        let after = outcome.model.store.digest(|n| n.starts_with("backbone."));
        assert_eq!(before, after);
        // Adapters did move.
        let init_adapters = ConkiModel::build(
            &cfg,
            &DataDims::of(&data.meta),
            cfg.training.seed,
            Variant::FULL,
        )
        .unwrap()
        .store
        .digest(|n| n.starts_with("adapter."));
        assert_ne!(
            init_adapters,
            outcome.model.store.digest(|n| n.starts_with("adapter."))
        );
    }

    #[test]
    fn stage2_freezes_adapters_bit_exactly() {
        let cfg = tiny_run_config();
        let external = tiny_data(32);
        let target = tiny_data(33);
        let pre = pretrain_adapters(&cfg, &external).unwrap();
        let records: Vec<(String, Tensor)> = pre
            .model
            .store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("adapter."))
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect();
        let loaded_digest = pre.model.store.digest(|n| n.starts_with("adapter."));
        let fin = finetune(&cfg, &target, &records).unwrap();
        assert_eq!(
            fin.model.store.digest(|n| n.starts_with("adapter.")),
            loaded_digest
        );
        // Everything else moved somewhere.
        assert_ne!(
            fin.model.store.digest(|n| !n.starts_with("adapter.")),
            pre.model.store.digest(|n| !n.starts_with("adapter."))
        );
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let cfg = tiny_run_config();
        let data = tiny_data(34);
        let a = pretrain_adapters(&cfg, &data).unwrap();
        let b = pretrain_adapters(&cfg, &data).unwrap();
        assert_eq!(
            a.model.store.digest(|_| true),
            b.model.store.digest(|_| true)
        );
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn no_cl_equals_lambda_zero() {
        let cfg = {
            let mut c = tiny_run_config();
            c.training.lambda = 0.05;
            c
        };
        let target = tiny_data(35);
        let external = tiny_data(36);

        let ablated = ablate(
            &cfg,
            &AblationSwitches {
                no_cl: true,
                ..AblationSwitches::default()
            },
            &target,
            Some(&external),
        )
        .unwrap();

        let mut zero_cfg = cfg.clone();
        zero_cfg.training.lambda = 0.0;
        let pre = pretrain_adapters(&zero_cfg, &external).unwrap();
        let records: Vec<(String, Tensor)> = pre
            .model
            .store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("adapter."))
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect();
        let fin = finetune(&zero_cfg, &target, &records).unwrap();
        assert_eq!(ablated.report, fin.report);
        // Per-step equivalence: the downstream epochs log identical losses.
        let ablated_stage2: Vec<&EpochLog> =
            ablated.log.iter().filter(|e| e.stage == 2).collect();
        let fin_stage2: Vec<&EpochLog> = fin.log.iter().filter(|e| e.stage == 2).collect();
        assert_eq!(ablated_stage2, fin_stage2);
    }

    #[test]
    fn no_pan_variant_trains_end_to_end() {
        let cfg = tiny_run_config();
        let target = tiny_data(60);
        let external = tiny_data(61);
        let outcome = ablate(
            &cfg,
            &AblationSwitches {
                no_pan: true,
                ..AblationSwitches::default()
            },
            &target,
            Some(&external),
        )
        .unwrap();
        assert!(outcome.report.mae.is_finite());
        // The variant carries no pan projection gradient; adapters were
        // pretrained and stay frozen downstream.
        assert!(outcome.model.store.find("adapter.t.out_proj").is_some());
        // Representations restrict to the specific keys.
        let mut g = crate::graph::Graph::new();
        let params = outcome.model.store.leaves(&mut g);
        let out = outcome
            .model
            .forward_sample(&mut g, &params, &target.test[0])
            .unwrap();
        assert!(out.pan.is_none());
        assert!(out.specific.is_some());
    }

    #[test]
    fn contradictory_switches_rejected() {
        assert!(AblationSwitches::parse("c2,c3").is_err());
        assert!(AblationSwitches::parse("bogus").is_err());
        let s = AblationSwitches::parse("c1, n1").unwrap();
        assert!(s.no_external && s.no_n1);
    }

    #[test]
    fn training_reduces_task_loss() {
        let mut cfg = tiny_run_config();
        cfg.training.epochs_stage1 = 6;
        cfg.generator.sigma = 0.1;
        let data = generate_synthetic_dataset(&GeneratorConfig {
            n_train: 48,
            n_valid: 12,
            n_test: 12,
            seed: 37,
            sigma: 0.1,
            ..GeneratorConfig::default()
        })
        .unwrap();

        let initial = ConkiModel::build(
            &cfg,
            &DataDims::of(&data.meta),
            cfg.training.seed,
            Variant::FULL,
        )
        .unwrap();
        let labels: Vec<f64> = data.train.iter().map(|s| s.label).collect();
        let initial_loss = task_loss(&initial.predict(&data.train).unwrap(), &labels).unwrap();
        let outcome = pretrain_adapters(&cfg, &data).unwrap();
        let final_loss =
            task_loss(&outcome.model.predict(&data.train).unwrap(), &labels).unwrap();
        assert!(
            final_loss < initial_loss,
            "loss did not improve: {initial_loss} -> {final_loss}"
        );
    }

    #[test]
    fn total_loss_gradient_at_init_matches_finite_difference() {
        let cfg = tiny_run_config();
        let data = tiny_data(38);
        let model = ConkiModel::build(
            &cfg,
            &DataDims::of(&data.meta),
            cfg.training.seed,
            Variant::FULL,
        )
        .unwrap();
        let batch: Vec<&MultimodalSample> = data.train.iter().take(3).collect();
        let labels: Vec<f64> = batch.iter().map(|s| s.label).collect();

        let eval = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let params = store.leaves(&mut g);
            let mut preds = Vec::new();
            let mut outs = Vec::new();
            for s in &batch {
                let out = model.forward_sample(&mut g, &params, s).unwrap();
                preds.push(out.y_hat);
                outs.push(out);
            }
            let task = task_loss_node(&mut g, &preds, &labels).unwrap();
            let partition =
                build_pairs_over(&labels, data.meta.label_range, model.knowledge_set()).unwrap();
            let rep_nodes = ConkiModel::batch_rep_nodes(&outs);
            let con =
                contrastive_loss_node(&mut g, &rep_nodes, &partition, cfg.training.tau, true)
                    .unwrap();
            let weighted = g.scale(con, 0.05);
            let total = g.add(task, weighted).unwrap();
            g.value(total).item()
        };

        let mut g = Graph::new();
        let params = model.store.leaves(&mut g);
        let mut preds = Vec::new();
        let mut outs = Vec::new();
        for s in &batch {
            let out = model.forward_sample(&mut g, &params, s).unwrap();
            preds.push(out.y_hat);
            outs.push(out);
        }
        let task = task_loss_node(&mut g, &preds, &labels).unwrap();
        let partition =
            build_pairs_over(&labels, data.meta.label_range, model.knowledge_set()).unwrap();
        let rep_nodes = ConkiModel::batch_rep_nodes(&outs);
        let con = contrastive_loss_node(&mut g, &rep_nodes, &partition, cfg.training.tau, true)
            .unwrap();
        let weighted = g.scale(con, 0.05);
        let total = g.add(task, weighted).unwrap();
        let grads = g.backward(total).unwrap();

        let mut rng = stream(50, Stream::GenTrain);
        use rand::Rng;
        let mut checked = 0;
        while checked < 8 {
            let pi = rng.random_range(0..model.store.len());
            let name = model.store.name(crate::nn::ParamId(pi)).to_string();
            let grad = match &grads[params[pi].0] {
                Some(gr) => gr.clone(),
                None => continue,
            };
            let k = rng.random_range(0..grad.len());
            if grad.data()[k].abs() < 1e-8 {
                continue;
            }
            let h = 1e-5;
            let mut plus = model.store.clone();
            plus.get_mut(crate::nn::ParamId(pi)).data_mut()[k] += h;
            let mut minus = model.store.clone();
            minus.get_mut(crate::nn::ParamId(pi)).data_mut()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = grad.data()[k];
            let denom = fd.abs().max(an.abs()).max(1e-10);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "{name}[{k}]: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
    }

    #[test]
    fn dump_representations_round_trip() {
        let cfg = tiny_run_config();
        let data = tiny_data(39);
        let model = ConkiModel::build(
            &cfg,
            &DataDims::of(&data.meta),
            cfg.training.seed,
            Variant::FULL,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_representations(&model, &data, &data.test, dir.path()).unwrap();

        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("manifest.json")).unwrap(),
        )
        .unwrap();
        let records = manifest["records"].as_array().unwrap();
        assert_eq!(records.len(), data.test.len());
        assert_eq!(manifest["vector_names"].as_array().unwrap().len(), 6);

        // First sample's first vector must equal a direct forward pass.
        let bytes = std::fs::read(dir.path().join("reps.bin")).unwrap();
        let d = model.d_repr;
        let first: Vec<f64> = bytes[..d * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut g = Graph::new();
        let params = model.store.leaves(&mut g);
        let out = model.forward_sample(&mut g, &params, &data.test[0]).unwrap();
        let o_t = g.value(out.pan.unwrap()[0]).data().to_vec();
        assert_eq!(first, o_t);
    }
}
