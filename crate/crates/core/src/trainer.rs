//! Stage-2 multi-task optimization: fast/slow parameter groups under Adam,
//! class-balanced few-shot sampling, round-robin task interleaving, and the
//! two-stage pipeline driver.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::FrozenBackbone;
use crate::composer::{
    compose_target, AttentionTable, CompositionConfig, EncoderReuse,
};
use crate::error::{Error, Result};
use crate::param::{Param, ParamId};
use crate::prompt::{
    init_prompt, InitScheme, PromptEncoder, PromptRole, PromptStore, SoftPrompt,
};
use crate::rng::{self, child_seed};
use crate::taskgen::{balanced_counts, LabeledExample, Task};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Hyperparams {
    pub lr_source: f64,
    pub lr_private: f64,
    pub lr_attention: f64,
    pub lr_encoder: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Hyperparams {
    /// Defaults for configurations that start from pre-trained prompts.
    pub fn initialized(seed: u64) -> Self {
        Self {
            lr_source: 0.05,
            lr_private: 0.02,
            lr_attention: 0.1,
            lr_encoder: 0.02,
            batch_size: 16,
            epochs: 20,
            seed,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    /// Defaults for from-scratch configurations, trained 10 epochs longer.
    pub fn scratch(seed: u64) -> Self {
        Self {
            lr_source: 0.15,
            lr_private: 0.07,
            lr_encoder: 0.07,
            epochs: 30,
            ..Self::initialized(seed)
        }
    }

    pub fn for_config(cfg: &CompositionConfig, seed: u64) -> Self {
        if cfg.init_source || cfg.init_private {
            Self::initialized(seed)
        } else {
            Self::scratch(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_source", self.lr_source),
            ("lr_private", self.lr_private),
            ("lr_attention", self.lr_attention),
            ("lr_encoder", self.lr_encoder),
        ] {
            if lr < 0.0 || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupLabel {
    Source,
    Private,
    Attention,
    Encoder,
}

struct GroupEntry {
    param: Param,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Trainable tensors sharing one learning rate; Adam moments persist here
/// across steps.
pub struct ParamGroup {
    pub label: GroupLabel,
    pub lr: f64,
    entries: Vec<GroupEntry>,
}

pub type GradMap = HashMap<ParamId, Vec<f64>>;

impl ParamGroup {
    pub fn new(label: GroupLabel, lr: f64, params: Vec<Param>) -> Self {
        let entries = params
            .into_iter()
            .map(|param| {
                let n = param.len();
                GroupEntry {
                    param,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    steps: 0,
                }
            })
            .collect();
        Self { label, lr, entries }
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.param.len()).sum()
    }

    pub fn params(&self) -> Vec<Param> {
        self.entries.iter().map(|e| e.param.clone()).collect()
    }

    /// One Adam step with bias correction for every entry that has a
    /// gradient in `grads`. With `require_all`, a missing gradient on any
    /// entry is a contract error (used by groups whose tensors participate
    /// in every step). Returns how many tensors were updated.
    pub fn adam_step(
        &mut self,
        grads: &GradMap,
        adam: &AdamConfig,
        require_all: bool,
    ) -> Result<usize> {
        let mut updated = 0;
        for entry in &mut self.entries {
            let Some(g) = grads.get(&entry.param.id()) else {
                if require_all {
                    return Err(Error::Contract(format!(
                        "missing gradient for a tensor in the {:?} group",
                        self.label
                    )));
                }
                continue;
            };
            if g.len() != entry.m.len() {
                return Err(Error::Contract(format!(
                    "gradient length {} does not match parameter length {}",
                    g.len(),
                    entry.m.len()
                )));
            }
            entry.steps += 1;
            let t = entry.steps as i32;
            let bc1 = 1.0 - adam.beta1.powi(t);
            let bc2 = 1.0 - adam.beta2.powi(t);
            let lr = self.lr;
            let (m, v) = (&mut entry.m, &mut entry.v);
            entry.param.update(|theta| {
                for i in 0..theta.len() {
                    m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * g[i];
                    v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    theta[i] -= lr * mhat / (vhat.sqrt() + adam.eps);
                }
            });
            updated += 1;
        }
        Ok(updated)
    }
}

/// Draws `n` training examples without replacement, class-balanced as far as
/// divisibility allows (remainder round-robin by class index; shortfalls in
/// one class are topped up from the others).
pub fn few_shot_sample(task: &Task, n: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    if task.train.len() < n {
        return Err(Error::Data(format!(
            "task {}: pool of {} cannot provide {n} shots",
            task.spec.name,
            task.train.len()
        )));
    }
    let classes = task.label_tokens.len();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, ex) in task.train.iter().enumerate() {
        let c = task.class_of(ex).ok_or_else(|| {
            Error::Data(format!(
                "task {}: example labeled outside the task's label set",
                task.spec.name
            ))
        })?;
        per_class[c].push(i);
    }
    let mut rng = rng::stream(child_seed(seed, &format!("fewshot:{}", task.spec.name)), "sample");
    for bucket in &mut per_class {
        rng::shuffle(&mut rng, bucket);
    }
    let mut take = balanced_counts(n, classes);
    loop {
        let mut deficit = 0;
        for (t, bucket) in take.iter_mut().zip(&per_class) {
            if *t > bucket.len() {
                deficit += *t - bucket.len();
                *t = bucket.len();
            }
        }
        if deficit == 0 {
            break;
        }
        for (t, bucket) in take.iter_mut().zip(&per_class) {
            while deficit > 0 && *t < bucket.len() {
                *t += 1;
                deficit -= 1;
            }
        }
    }
    let mut picked: Vec<usize> = Vec::with_capacity(n);
    for (t, bucket) in take.iter().zip(&per_class) {
        picked.extend_from_slice(&bucket[..*t]);
    }
    rng::shuffle(&mut rng, &mut picked);
    Ok(picked.into_iter().map(|i| task.train[i].clone()).collect())
}

/// Per-task training/evaluation split handed to the optimizer.
#[derive(Clone, Debug)]
pub struct TaskSplit {
    pub name: String,
    pub label_tokens: Vec<u32>,
    pub train: Vec<LabeledExample>,
    pub eval: Vec<LabeledExample>,
}

impl TaskSplit {
    pub fn full(task: &Task) -> Self {
        Self {
            name: task.spec.name.clone(),
            label_tokens: task.label_tokens.clone(),
            train: task.train.clone(),
            eval: task.eval.clone(),
        }
    }

    pub fn few_shot(task: &Task, shots: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            train: few_shot_sample(task, shots, seed)?,
            ..Self::full(task)
        })
    }

    pub fn class_of(&self, ex: &LabeledExample) -> Option<usize> {
        self.label_tokens.iter().position(|&t| t == ex.label_token)
    }
}

/// All prompt-side state of one run.
#[derive(Debug)]
pub struct PromptBank {
    pub sources: Vec<SoftPrompt>,
    pub privates: Vec<SoftPrompt>,
    pub encoder: PromptEncoder,
}

/// Builds sources, privates, and the encoder for a resolved configuration.
/// Initialized schemes load stage-1 prompts from the store by task name.
pub fn setup_bank(
    cfg: &CompositionConfig,
    tasks: &[TaskSplit],
    store: Option<&PromptStore>,
    prompt_len: usize,
    d_model: usize,
    seed: u64,
) -> Result<PromptBank> {
    let mut sources = Vec::new();
    if cfg.use_source {
        if cfg.init_source {
            let store = store.ok_or_else(|| {
                Error::Store("initialized sources need a prompt store".into())
            })?;
            for t in tasks {
                let mut p = init_prompt(
                    &t.name,
                    PromptRole::Source,
                    prompt_len,
                    d_model,
                    0,
                    InitScheme::FromCheckpoint(store),
                )
                .map_err(|e| match e {
                    Error::Store(_) => {
                        Error::Store(format!("missing stage-1 prompt for task '{}'", t.name))
                    }
                    other => other,
                })?;
                p.role = PromptRole::Source;
                sources.push(p);
            }
        } else {
            for i in 0..cfg.num_sources {
                sources.push(init_prompt(
                    &format!("src{i}"),
                    PromptRole::Source,
                    prompt_len,
                    d_model,
                    child_seed(seed, &format!("source-init:{i}")),
                    InitScheme::Gaussian,
                )?);
            }
        }
    }
    let mut privates = Vec::new();
    if cfg.use_private {
        for t in tasks {
            let p = if cfg.init_private {
                let store = store.ok_or_else(|| {
                    Error::Store("initialized privates need a prompt store".into())
                })?;
                let mut p = init_prompt(
                    &t.name,
                    PromptRole::Private,
                    prompt_len,
                    d_model,
                    0,
                    InitScheme::FromCheckpoint(store),
                )
                .map_err(|e| match e {
                    Error::Store(_) => {
                        Error::Store(format!("missing stage-1 prompt for task '{}'", t.name))
                    }
                    other => other,
                })?;
                p.role = PromptRole::Private;
                // Break shared storage with the source copy of the same name.
                p.embeddings = Param::new(&p.embeddings.shape(), p.embeddings.values())?;
                p
            } else {
                init_prompt(
                    &t.name,
                    PromptRole::Private,
                    prompt_len,
                    d_model,
                    child_seed(seed, &format!("private-init:{}", t.name)),
                    InitScheme::Gaussian,
                )?
            };
            privates.push(p);
        }
    }
    let mut encoder = PromptEncoder::identity(d_model);
    // SIP keeps its frozen-source semantics strict: the shared encoder
    // freezes alongside the sources.
    encoder.trainable = !(cfg.use_source && !cfg.learn_source);
    Ok(PromptBank {
        sources,
        privates,
        encoder,
    })
}

/// Splits the trainable tensors into the fast/slow learning-rate groups.
pub fn build_param_groups(
    cfg: &CompositionConfig,
    bank: &PromptBank,
    table: Option<&AttentionTable>,
    hp: &Hyperparams,
) -> Result<Vec<ParamGroup>> {
    if cfg.use_source && bank.sources.len() != cfg.num_sources {
        return Err(Error::Contract(format!(
            "bank holds {} sources but the configuration expects {}",
            bank.sources.len(),
            cfg.num_sources
        )));
    }
    if cfg.use_source && table.is_none() {
        return Err(Error::Contract(
            "source composition requires an attention table".into(),
        ));
    }
    let mut groups = Vec::new();
    if cfg.use_source && cfg.learn_source {
        groups.push(ParamGroup::new(
            GroupLabel::Source,
            hp.lr_source,
            bank.sources.iter().map(|p| p.embeddings.clone()).collect(),
        ));
    }
    if cfg.use_private {
        if bank.privates.is_empty() {
            return Err(Error::Contract("configuration uses private prompts but the bank has none".into()));
        }
        groups.push(ParamGroup::new(
            GroupLabel::Private,
            hp.lr_private,
            bank.privates.iter().map(|p| p.embeddings.clone()).collect(),
        ));
    }
    if let Some(table) = table {
        if cfg.use_source {
            groups.push(ParamGroup::new(
                GroupLabel::Attention,
                hp.lr_attention,
                vec![table.logits.clone()],
            ));
        }
    }
    if bank.encoder.trainable {
        groups.push(ParamGroup::new(
            GroupLabel::Encoder,
            hp.lr_encoder,
            vec![bank.encoder.w.clone(), bank.encoder.b.clone()],
        ));
    }
    Ok(groups)
}

/// Deterministic per-epoch batch schedule for one task: indices shuffled by
/// `(seed, epoch, task)`, then chunked.
pub fn schedule_batches(
    train_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    task_name: &str,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..train_len).collect();
    let mut r = rng::stream(
        child_seed(seed, &format!("epoch:{epoch}:task:{task_name}")),
        "batches",
    );
    rng::shuffle(&mut r, &mut idx);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub task: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Everything a finished run reports.
pub struct TrainRun {
    pub config: CompositionConfig,
    pub task_names: Vec<String>,
    pub trace: Vec<TraceRow>,
    pub per_task_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub bank: PromptBank,
    pub table: Option<AttentionTable>,
}

impl TrainRun {
    pub fn save_trace_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,task,loss,accuracy\n");
        for row in &self.trace {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                row.epoch, row.task, row.loss, row.accuracy
            ));
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::Export(format!("writing {}: {e}", path.display())))
    }
}

/// Encodes all slot prompts on a tape and composes the target prompt for
/// task `ti`. `collect` receives (param, leaf) pairs for every trainable
/// leaf inserted.
#[allow(clippy::too_many_arguments)]
fn compose_on_tape(
    tape: &Tape,
    cfg: &CompositionConfig,
    bank: &PromptBank,
    table: Option<&AttentionTable>,
    ti: usize,
    train: bool,
    collect: &mut Vec<(Param, Tensor)>,
) -> Result<Tensor> {
    let enc = bank.encoder.on_tape(tape, train && bank.encoder.trainable);
    if train && bank.encoder.trainable {
        collect.push((bank.encoder.w.clone(), enc.w.clone()));
        collect.push((bank.encoder.b.clone(), enc.b.clone()));
    }
    let mut sources = Vec::with_capacity(bank.sources.len());
    for p in &bank.sources {
        let train_src = train && cfg.learn_source;
        let raw = tape.leaf_param(&p.embeddings, train_src);
        if train_src {
            collect.push((p.embeddings.clone(), raw.clone()));
        }
        sources.push(enc.encode(&raw)?);
    }
    let private = if cfg.use_private {
        let p = bank.privates.get(ti).ok_or_else(|| {
            Error::Contract(format!("bank holds no private prompt for task {ti}"))
        })?;
        let raw = tape.leaf_param(&p.embeddings, train);
        if train {
            collect.push((p.embeddings.clone(), raw.clone()));
        }
        Some(enc.encode(&raw)?)
    } else {
        None
    };
    let table_leaf = match (cfg.use_source, table) {
        (true, Some(t)) => {
            let leaf = tape.leaf_param(&t.logits, train);
            if train {
                collect.push((t.logits.clone(), leaf.clone()));
            }
            Some(leaf)
        }
        (true, None) => {
            return Err(Error::Contract(
                "source composition requires an attention table".into(),
            ))
        }
        (false, _) => None,
    };
    compose_target(ti, &sources, private.as_ref(), table_leaf.as_ref(), cfg)
}

/// Accuracy of the composed prompt on one task's eval set: argmax over the
/// task's own label tokens.
pub fn evaluate_task(
    cfg: &CompositionConfig,
    model: &FrozenBackbone,
    bank: &PromptBank,
    table: Option<&AttentionTable>,
    ti: usize,
    split: &TaskSplit,
) -> Result<f64> {
    if split.eval.is_empty() {
        return Err(Error::Data(format!("task {} has no eval examples", split.name)));
    }
    let tape = Tape::new();
    let mut sink = Vec::new();
    let target = compose_on_tape(&tape, cfg, bank, table, ti, false, &mut sink)?;
    let taped = model.on_tape(&tape);
    let mut correct = 0usize;
    for ex in &split.eval {
        let logits = taped.forward(&target, &ex.tokens)?.values();
        let mut best = 0usize;
        for (c, &tok) in split.label_tokens.iter().enumerate() {
            if logits[tok as usize] > logits[split.label_tokens[best] as usize] {
                best = c;
            }
        }
        if Some(best) == split.class_of(ex) {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.eval.len() as f64)
}

/// Joint multi-task training: per epoch, every task's batches are shuffled
/// and interleaved round-robin; each step composes the task's target prompt,
/// backpropagates through the frozen backbone into the trainable groups, and
/// applies one Adam step per group.
pub fn train_multitask(
    cfg: &CompositionConfig,
    model: &FrozenBackbone,
    bank: PromptBank,
    table: Option<AttentionTable>,
    tasks: &[TaskSplit],
    hp: &Hyperparams,
) -> Result<TrainRun> {
    hp.validate()?;
    if tasks.is_empty() {
        return Err(Error::Data("no tasks to train on".into()));
    }
    for t in tasks {
        if t.train.is_empty() {
            return Err(Error::Data(format!("task {} has no training examples", t.name)));
        }
    }
    if cfg.use_private && bank.privates.len() != tasks.len() {
        return Err(Error::Contract(format!(
            "bank holds {} private prompts for {} tasks",
            bank.privates.len(),
            tasks.len()
        )));
    }
    if let Some(table) = &table {
        if table.num_targets != tasks.len() {
            return Err(Error::Contract(format!(
                "attention table covers {} tasks, run has {}",
                table.num_targets,
                tasks.len()
            )));
        }
    }
    let mut groups = build_param_groups(cfg, &bank, table.as_ref(), hp)?;
    let adam = hp.adam();
    let mut trace = Vec::with_capacity(hp.epochs * tasks.len());

    for epoch in 0..hp.epochs {
        let schedules: Vec<Vec<Vec<usize>>> = tasks
            .iter()
            .map(|t| schedule_batches(t.train.len(), hp.batch_size, hp.seed, epoch, &t.name))
            .collect();
        let rounds = schedules.iter().map(Vec::len).max().unwrap_or(0);
        let mut epoch_loss = vec![0.0; tasks.len()];
        let mut epoch_steps = vec![0usize; tasks.len()];

        for round in 0..rounds {
            for (ti, split) in tasks.iter().enumerate() {
                let Some(batch) = schedules[ti].get(round) else {
                    continue;
                };
                let tape = Tape::new();
                let mut leaves = Vec::new();
                let target =
                    compose_on_tape(&tape, cfg, &bank, table.as_ref(), ti, true, &mut leaves)?;
                let taped = model.on_tape(&tape);
                let batch_tokens: Vec<&[u32]> = batch
                    .iter()
                    .map(|&i| split.train[i].tokens.as_slice())
                    .collect();
                let labels: Vec<usize> = batch
                    .iter()
                    .map(|&i| split.train[i].label_token as usize)
                    .collect();
                let logits = taped.forward_batch(&target, &batch_tokens)?;
                let loss = logits.cross_entropy(&labels)?;
                loss.backward()?;

                let mut grads: GradMap = HashMap::new();
                for (param, leaf) in &leaves {
                    if let Some(g) = leaf.grad() {
                        grads.insert(param.id(), g);
                    }
                }
                if cfg.use_private {
                    let own = bank.privates[ti].embeddings.id();
                    if !grads.contains_key(&own) {
                        return Err(Error::Contract(format!(
                            "private prompt of task {} received no gradient",
                            split.name
                        )));
                    }
                }
                for group in &mut groups {
                    // Only the active task's private prompt is on this tape.
                    let require_all = group.label != GroupLabel::Private;
                    group.adam_step(&grads, &adam, require_all)?;
                }
                epoch_loss[ti] += loss.scalar()?;
                epoch_steps[ti] += 1;
            }
        }

        for (ti, split) in tasks.iter().enumerate() {
            let accuracy = evaluate_task(cfg, model, &bank, table.as_ref(), ti, split)?;
            trace.push(TraceRow {
                epoch,
                task: split.name.clone(),
                loss: epoch_loss[ti] / epoch_steps[ti].max(1) as f64,
                accuracy,
            });
        }
    }

    let mut per_task_accuracy = Vec::with_capacity(tasks.len());
    for (ti, split) in tasks.iter().enumerate() {
        per_task_accuracy.push(evaluate_task(cfg, model, &bank, table.as_ref(), ti, split)?);
    }
    let mean_accuracy = per_task_accuracy.iter().sum::<f64>() / tasks.len() as f64;
    Ok(TrainRun {
        config: cfg.clone(),
        task_names: tasks.iter().map(|t| t.name.clone()).collect(),
        trace,
        per_task_accuracy,
        mean_accuracy,
        bank,
        table,
    })
}

/// Stage-1 prompt tuning on one task: trains raw embeddings plus a private
/// clone of the shared encoder, returning both.
pub fn train_source_prompt(
    task: &TaskSplit,
    model: &FrozenBackbone,
    encoder: &PromptEncoder,
    hp: &Hyperparams,
    prompt_len: usize,
) -> Result<(SoftPrompt, PromptEncoder)> {
    hp.validate()?;
    if task.train.is_empty() {
        return Err(Error::Data(format!("task {} has no training examples", task.name)));
    }
    let d = model.config().d_model;
    let prompt = init_prompt(
        &task.name,
        PromptRole::Source,
        prompt_len,
        d,
        child_seed(hp.seed, &format!("stage1:{}", task.name)),
        InitScheme::Gaussian,
    )?;
    let enc = encoder.clone_values();
    let mut groups = vec![ParamGroup::new(
        GroupLabel::Source,
        hp.lr_source,
        vec![prompt.embeddings.clone()],
    )];
    if enc.trainable {
        groups.push(ParamGroup::new(
            GroupLabel::Encoder,
            hp.lr_encoder,
            vec![enc.w.clone(), enc.b.clone()],
        ));
    }
    let adam = hp.adam();
    for epoch in 0..hp.epochs {
        for batch in schedule_batches(task.train.len(), hp.batch_size, hp.seed, epoch, &task.name)
        {
            let tape = Tape::new();
            let taped_enc = enc.on_tape(&tape, enc.trainable);
            let raw = tape.leaf_param(&prompt.embeddings, true);
            let encoded = taped_enc.encode(&raw)?;
            let taped = model.on_tape(&tape);
            let tokens: Vec<&[u32]> = batch
                .iter()
                .map(|&i| task.train[i].tokens.as_slice())
                .collect();
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| task.train[i].label_token as usize)
                .collect();
            let loss = taped.forward_batch(&encoded, &tokens)?.cross_entropy(&labels)?;
            loss.backward()?;
            let mut grads: GradMap = HashMap::new();
            for (param, leaf) in [
                (&prompt.embeddings, &raw),
                (&enc.w, &taped_enc.w),
                (&enc.b, &taped_enc.b),
            ] {
                if let Some(g) = leaf.grad() {
                    grads.insert(param.id(), g);
                }
            }
            for group in &mut groups {
                group.adam_step(&grads, &adam, true)?;
            }
        }
    }
    Ok((prompt, enc))
}

/// How the pipeline samples each stage.
#[derive(Clone, Debug)]
pub struct PipelinePlan {
    pub cfg: CompositionConfig,
    pub hp1: Hyperparams,
    pub hp2: Hyperparams,
    /// Stage-1 shots per source task; 0 trains on the full pool.
    pub stage1_shots: usize,
    /// Stage-2 shots per target task (aligned with the task list); 0 = full.
    pub stage2_shots: Vec<usize>,
    pub prompt_len: usize,
}

/// The two-stage driver: Stage 1 pre-trains one source prompt per stage-1
/// task and persists it (skipped entirely for from-scratch configurations),
/// Stage 2 builds the bank per the configuration and trains all target tasks
/// jointly.
pub fn run_pipeline(
    plan: &PipelinePlan,
    model: &FrozenBackbone,
    stage1_tasks: &[Task],
    stage2_tasks: &[Task],
    store: &PromptStore,
) -> Result<TrainRun> {
    let mut cfg = plan.cfg.clone();
    cfg.resolve_sources(stage1_tasks.len(), stage2_tasks.len());
    let d = model.config().d_model;

    let needs_stage1 = cfg.init_source || cfg.init_private;
    let mut stage1_encoders: HashMap<String, PromptEncoder> = HashMap::new();
    if needs_stage1 {
        for task in stage1_tasks {
            let split = if plan.stage1_shots == 0 {
                TaskSplit::full(task)
            } else {
                TaskSplit::few_shot(task, plan.stage1_shots, plan.hp1.seed)?
            };
            let encoder = PromptEncoder::identity(d);
            let (prompt, trained_enc) =
                train_source_prompt(&split, model, &encoder, &plan.hp1, plan.prompt_len)?;
            store.save(&prompt)?;
            stage1_encoders.insert(task.spec.name.clone(), trained_enc);
        }
    }

    let mut splits = Vec::with_capacity(stage2_tasks.len());
    for (i, task) in stage2_tasks.iter().enumerate() {
        let shots = plan.stage2_shots.get(i).copied().unwrap_or(0);
        splits.push(if shots == 0 {
            TaskSplit::full(task)
        } else {
            TaskSplit::few_shot(task, shots, plan.hp2.seed)?
        });
    }

    let bank = setup_bank(&cfg, &splits, Some(store), plan.prompt_len, d, plan.hp2.seed)?;
    if cfg.encoder_reuse == EncoderReuse::Carryover && needs_stage1 {
        // Bake each prompt's stage-1 encoder into its loaded embeddings; the
        // stage-2 encoder then starts from the identity as usual.
        for p in bank.sources.iter().chain(bank.privates.iter()) {
            if let Some(enc1) = stage1_encoders.get(&p.name) {
                let baked = enc1.encode_values(&p.embeddings.values(), p.rows());
                p.embeddings.set_values(baked)?;
            }
        }
    }
    let table = if cfg.use_source {
        let task_names: Vec<String> = splits.iter().map(|s| s.name.clone()).collect();
        let source_names: Vec<String> = bank.sources.iter().map(|p| p.name.clone()).collect();
        Some(AttentionTable::new(&task_names, &source_names, cfg.use_private))
    } else {
        None
    };
    train_multitask(&cfg, model, bank, table, &splits, &plan.hp2)
}
