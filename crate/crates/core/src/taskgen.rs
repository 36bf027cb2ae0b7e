//! Deterministic synthetic task families with controllable shared structure.
//!
//! Each cluster draws a latent linear rule over a bag-of-token-embeddings
//! feature (a fixed random projection of token ids). Tasks in a cluster share
//! the rule up to a small rotation and differ in token distribution, which
//! makes within-cluster transfer profitable and between-cluster transfer
//! near-chance. Labels are single tokens in the backbone vocabulary so label
//! schemes genuinely alias or separate output-embedding rows across tasks.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::rng::{self, child_seed};

pub const DEFAULT_POOL_SIZE: usize = 512;
pub const DEFAULT_EVAL_SIZE: usize = 128;

/// Maximum content sequence length before any prefix token.
pub const MAX_SEQ_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScheme {
    /// Tasks in the same cluster share label tokens.
    Natural,
    /// Label tokens are globally unique per (task, class).
    Synthetic,
    /// Class `c` maps to numeric token "c" for every task.
    Standardized,
}

impl std::str::FromStr for LabelScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "natural" => Ok(LabelScheme::Natural),
            "synthetic" => Ok(LabelScheme::Synthetic),
            "standardized" => Ok(LabelScheme::Standardized),
            other => Err(Error::Config(format!(
                "unknown label scheme '{other}' (natural, synthetic, standardized)"
            ))),
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct TaskSpec {
    pub name: String,
    pub cluster_id: usize,
    pub num_classes: usize,
    pub label_scheme: LabelScheme,
    pub prefix_enabled: bool,
    pub pool_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub tokens: Vec<u32>,
    pub label_token: u32,
    pub task_name: String,
}

#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    /// Reserved prefix token for this task, present in examples only while
    /// prefixes are enabled. File-loaded tasks have none.
    pub prefix_token: Option<u32>,
    /// Class index -> label token.
    pub label_tokens: Vec<u32>,
    pub train: Vec<LabeledExample>,
    pub eval: Vec<LabeledExample>,
}

impl Task {
    pub fn class_of(&self, ex: &LabeledExample) -> Option<usize> {
        self.label_tokens.iter().position(|&t| t == ex.label_token)
    }
}

/// Reserved vocabulary ranges: prefixes, then label tokens, then content.
#[derive(Clone, Debug)]
pub struct VocabLayout {
    pub n_prefix: usize,
    pub label_base: u32,
    pub n_label: usize,
    pub content_base: u32,
    pub content_count: usize,
}

#[derive(Clone, Debug)]
pub struct FamilyConfig {
    pub n_clusters: usize,
    pub tasks_per_cluster: usize,
    pub num_classes: usize,
    pub scheme: LabelScheme,
    pub prefixes: bool,
    pub pool_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    /// Dimension of the latent feature space the rules live in.
    pub feature_dim: usize,
    /// Number of distinct content tokens tasks draw from.
    pub content_tokens: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Maximum per-task rotation of the cluster rule, in degrees.
    pub rotation_deg: f64,
    /// Fraction of a score standard deviation kept clear around class
    /// boundaries when sampling examples.
    pub margin_frac: f64,
    /// When set, every task draws content tokens from one shared
    /// distribution instead of a task-specific one, maximizing input overlap
    /// (and so label-row interference under aliased schemes).
    pub shared_token_distribution: bool,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            n_clusters: 2,
            tasks_per_cluster: 2,
            num_classes: 2,
            scheme: LabelScheme::Natural,
            prefixes: true,
            pool_size: DEFAULT_POOL_SIZE,
            eval_size: DEFAULT_EVAL_SIZE,
            seed: 7,
            feature_dim: 4,
            content_tokens: 10,
            min_len: 2,
            max_len: 5,
            rotation_deg: 15.0,
            margin_frac: 1.0,
            shared_token_distribution: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskFamily {
    pub cfg: FamilyConfig,
    pub layout: VocabLayout,
    pub tasks: Vec<Task>,
    /// Fixed random projection: content token -> feature vector.
    phi: Vec<f64>,
}

impl TaskFamily {
    /// Bag-of-token-embeddings feature of a sequence: the mean projection of
    /// its content tokens. Non-content tokens (prefixes, labels) are ignored.
    pub fn example_feature(&self, tokens: &[u32]) -> Vec<f64> {
        let f = self.cfg.feature_dim;
        let mut out = vec![0.0; f];
        let mut n = 0usize;
        for &t in tokens {
            let idx = t as i64 - self.layout.content_base as i64;
            if idx >= 0 && (idx as usize) < self.layout.content_count {
                let row = &self.phi[idx as usize * f..(idx as usize + 1) * f];
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
                n += 1;
            }
        }
        if n > 0 {
            for o in &mut out {
                *o /= n as f64;
            }
        }
        out
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.spec.name.clone()).collect()
    }
}

/// Balanced per-class counts: remainder goes round-robin by class index.
pub fn balanced_counts(total: usize, classes: usize) -> Vec<usize> {
    let base = total / classes;
    let rem = total % classes;
    (0..classes)
        .map(|c| base + usize::from(c < rem))
        .collect()
}

fn scheme_tokens(
    layout: &VocabLayout,
    scheme: LabelScheme,
    cluster_id: usize,
    task_index: usize,
    num_classes: usize,
) -> Vec<u32> {
    let base = layout.label_base;
    (0..num_classes as u32)
        .map(|c| match scheme {
            LabelScheme::Natural => base + (cluster_id as u32) * 3 + c,
            LabelScheme::Synthetic => base + (task_index as u32) * 3 + c,
            LabelScheme::Standardized => base + c,
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

/// Generates the family: latent rules per cluster, rotated per task, pools
/// labeled by thresholding the rule score over a shared calibration cloud.
pub fn make_family(cfg: &FamilyConfig, backbone: &BackboneConfig) -> Result<TaskFamily> {
    if cfg.n_clusters == 0 || cfg.tasks_per_cluster == 0 {
        return Err(Error::Config("family needs at least one task".into()));
    }
    if !(cfg.num_classes == 2 || cfg.num_classes == 3) {
        return Err(Error::Config("num_classes must be 2 or 3".into()));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len || cfg.max_len > MAX_SEQ_LEN {
        return Err(Error::Config(format!(
            "sequence lengths must satisfy 1 <= min <= max <= {MAX_SEQ_LEN}"
        )));
    }
    let n_tasks = cfg.n_clusters * cfg.tasks_per_cluster;
    let n_prefix = n_tasks;
    let n_label = 3 * n_tasks;
    let content_base = n_prefix + n_label;
    if content_base + 8 > backbone.vocab_size {
        return Err(Error::Config(format!(
            "token budget exceeds vocabulary: {n_prefix} prefixes + {n_label} labels + >=8 \
             content tokens > vocab_size {}",
            backbone.vocab_size
        )));
    }
    let content_count = cfg
        .content_tokens
        .min(backbone.vocab_size - content_base)
        .max(8);
    let layout = VocabLayout {
        n_prefix,
        label_base: n_prefix as u32,
        n_label,
        content_base: content_base as u32,
        content_count,
    };

    let f = cfg.feature_dim;
    let phi = rng::gaussian_vec(&mut rng::stream(cfg.seed, "phi"), content_count * f, 1.0);

    // Cluster rules: unit vectors kept pairwise near-orthogonal so that
    // between-cluster transfer stays near chance.
    let mut rules_rng = rng::stream(cfg.seed, "cluster-rules");
    let mut cluster_rules: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_clusters);
    for _ in 0..cfg.n_clusters {
        let mut tries = 0;
        loop {
            let mut w = rng::gaussian_vec(&mut rules_rng, f, 1.0);
            normalize(&mut w);
            let ok = cluster_rules.iter().all(|prev| dot(prev, &w).abs() <= 0.25);
            tries += 1;
            if ok {
                cluster_rules.push(w);
                break;
            }
            if tries > 500 {
                return Err(Error::Config(
                    "could not draw near-orthogonal cluster rules; raise feature_dim".into(),
                ));
            }
        }
    }

    // Shared calibration cloud: uniform token usage, so every task in a
    // cluster thresholds its rule around the same center.
    let mut cal_rng = rng::stream(cfg.seed, "calibration");
    let cal_features: Vec<Vec<f64>> = (0..512)
        .map(|_| {
            let len = rng::uniform_usize(&mut cal_rng, cfg.min_len, cfg.max_len);
            let mut acc = vec![0.0; f];
            for _ in 0..len {
                let tok = rng::uniform_usize(&mut cal_rng, 0, content_count - 1);
                for (a, v) in acc.iter_mut().zip(&phi[tok * f..(tok + 1) * f]) {
                    *a += v;
                }
            }
            for a in &mut acc {
                *a /= len as f64;
            }
            acc
        })
        .collect();

    let mut tasks = Vec::with_capacity(n_tasks);
    for cluster in 0..cfg.n_clusters {
        for within in 0..cfg.tasks_per_cluster {
            let global = cluster * cfg.tasks_per_cluster + within;
            let name = format!("c{cluster}t{within}");
            let task_seed = child_seed(cfg.seed, &format!("task:{name}"));
            let mut trng = rng::stream(task_seed, "gen");

            // Task rule: cluster rule rotated by up to rotation_deg degrees
            // inside a random 2-plane.
            let w_c = &cluster_rules[cluster];
            let mut orth = rng::gaussian_vec(&mut trng, f, 1.0);
            let proj = dot(&orth, w_c);
            for (o, w) in orth.iter_mut().zip(w_c) {
                *o -= proj * w;
            }
            normalize(&mut orth);
            let theta = cfg.rotation_deg.to_radians()
                * rng::uniform_usize(&mut trng, 0, 1000) as f64
                / 1000.0;
            let w_task: Vec<f64> = w_c
                .iter()
                .zip(&orth)
                .map(|(w, o)| theta.cos() * w + theta.sin() * o)
                .collect();

            // Thresholds from the shared calibration cloud.
            let mut cal_scores: Vec<f64> =
                cal_features.iter().map(|ft| dot(&w_task, ft)).collect();
            cal_scores.sort_by(f64::total_cmp);
            let thresholds: Vec<f64> = if cfg.num_classes == 2 {
                vec![cal_scores[cal_scores.len() / 2]]
            } else {
                vec![
                    cal_scores[cal_scores.len() / 3],
                    cal_scores[2 * cal_scores.len() / 3],
                ]
            };
            let mean = cal_scores.iter().sum::<f64>() / cal_scores.len() as f64;
            let std = (cal_scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
                / cal_scores.len() as f64)
                .sqrt();
            let margin = cfg.margin_frac * std;

            // Mildly non-uniform token distribution, task-specific unless the
            // family shares one.
            let weights = if cfg.shared_token_distribution {
                rng::gaussian_vec(
                    &mut rng::stream(cfg.seed, "shared-token-dist"),
                    content_count,
                    0.5,
                )
            } else {
                rng::gaussian_vec(&mut trng, content_count, 0.5)
            };
            let max_w = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = weights.iter().map(|w| (w - max_w).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut cum = Vec::with_capacity(content_count);
            let mut acc = 0.0;
            for e in &exps {
                acc += e / total;
                cum.push(acc);
            }

            let total_needed = cfg.pool_size + cfg.eval_size;
            let per_class = balanced_counts(total_needed, cfg.num_classes);
            let train_share = balanced_counts(cfg.pool_size, cfg.num_classes);
            let mut buckets: Vec<Vec<Vec<u32>>> = vec![Vec::new(); cfg.num_classes];
            let mut draws = 0usize;
            while buckets
                .iter()
                .zip(&per_class)
                .any(|(b, want)| b.len() < *want)
            {
                draws += 1;
                if draws > 500_000 {
                    return Err(Error::Data(format!(
                        "task {name}: margin {margin:.3} too strict to fill balanced classes"
                    )));
                }
                let len = rng::uniform_usize(&mut trng, cfg.min_len, cfg.max_len);
                let mut tokens = Vec::with_capacity(len);
                let mut feat = vec![0.0; f];
                for _ in 0..len {
                    let u = rng::uniform_usize(&mut trng, 0, 1_000_000) as f64 / 1_000_001.0;
                    let tok = cum.partition_point(|&c| c <= u).min(content_count - 1);
                    tokens.push(layout.content_base + tok as u32);
                    for (a, v) in feat.iter_mut().zip(&phi[tok * f..(tok + 1) * f]) {
                        *a += v;
                    }
                }
                for a in &mut feat {
                    *a /= len as f64;
                }
                let score = dot(&w_task, &feat);
                if thresholds.iter().any(|t| (score - t).abs() < margin) {
                    continue;
                }
                let class = thresholds.iter().filter(|&&t| score > t).count();
                if buckets[class].len() < per_class[class] {
                    buckets[class].push(tokens);
                }
            }

            let label_tokens =
                scheme_tokens(&layout, cfg.scheme, cluster, global, cfg.num_classes);
            let prefix_token = global as u32;
            let build = |tokens: &Vec<u32>, class: usize| {
                let mut toks = tokens.clone();
                if cfg.prefixes {
                    toks.insert(0, prefix_token);
                }
                LabeledExample {
                    tokens: toks,
                    label_token: label_tokens[class],
                    task_name: name.clone(),
                }
            };
            let mut train = Vec::with_capacity(cfg.pool_size);
            let mut eval = Vec::with_capacity(cfg.eval_size);
            for (class, bucket) in buckets.iter().enumerate() {
                for (i, toks) in bucket.iter().enumerate() {
                    if i < train_share[class] {
                        train.push(build(toks, class));
                    } else {
                        eval.push(build(toks, class));
                    }
                }
            }
            rng::shuffle(&mut rng::stream(task_seed, "shuffle-train"), &mut train);
            rng::shuffle(&mut rng::stream(task_seed, "shuffle-eval"), &mut eval);

            tasks.push(Task {
                spec: TaskSpec {
                    name,
                    cluster_id: cluster,
                    num_classes: cfg.num_classes,
                    label_scheme: cfg.scheme,
                    prefix_enabled: cfg.prefixes,
                    pool_size: cfg.pool_size,
                    seed: task_seed,
                },
                prefix_token: Some(prefix_token),
                label_tokens,
                train,
                eval,
            });
        }
    }

    Ok(TaskFamily {
        cfg: cfg.clone(),
        layout,
        tasks,
        phi,
    })
}

/// Remaps label tokens to a new scheme; the class partition is untouched.
pub fn apply_label_scheme(family: &TaskFamily, scheme: LabelScheme) -> TaskFamily {
    let mut out = family.clone();
    out.cfg.scheme = scheme;
    for (global, task) in out.tasks.iter_mut().enumerate() {
        let new_tokens = scheme_tokens(
            &family.layout,
            scheme,
            task.spec.cluster_id,
            global,
            task.spec.num_classes,
        );
        let old_tokens = task.label_tokens.clone();
        let remap = |ex: &mut LabeledExample| {
            let class = old_tokens
                .iter()
                .position(|&t| t == ex.label_token)
                .expect("label token belongs to the task");
            ex.label_token = new_tokens[class];
        };
        task.train.iter_mut().for_each(remap);
        task.eval.iter_mut().for_each(remap);
        task.label_tokens = new_tokens;
        task.spec.label_scheme = scheme;
    }
    out
}

/// Enables or strips task prefixes, preserving content tokens and labels.
pub fn with_prefixes(family: &TaskFamily, enabled: bool) -> TaskFamily {
    let mut out = family.clone();
    out.cfg.prefixes = enabled;
    for task in &mut out.tasks {
        if task.spec.prefix_enabled == enabled {
            continue;
        }
        let prefix = task
            .prefix_token
            .expect("generated tasks always reserve a prefix token");
        let fix = |ex: &mut LabeledExample| {
            if enabled {
                ex.tokens.insert(0, prefix);
            } else if ex.tokens.first() == Some(&prefix) {
                ex.tokens.remove(0);
            }
        };
        task.train.iter_mut().for_each(fix);
        task.eval.iter_mut().for_each(fix);
        task.spec.prefix_enabled = enabled;
    }
    out
}

/// Two tasks with identical input pools and flipped labels. Prefixes are off
/// by default; enable them with [`with_prefixes`] to make the pair separable.
pub fn make_contradictory_pair(seed: u64, backbone: &BackboneConfig) -> Result<TaskFamily> {
    let cfg = FamilyConfig {
        n_clusters: 1,
        tasks_per_cluster: 2,
        num_classes: 2,
        scheme: LabelScheme::Natural,
        prefixes: false,
        content_tokens: 10,
        seed,
        ..FamilyConfig::default()
    };
    let mut family = make_family(&cfg, backbone)?;
    let (first, rest) = family.tasks.split_at_mut(1);
    let a = &first[0];
    let b = &mut rest[0];
    // b mirrors a's inputs with every label flipped.
    let tokens = b.label_tokens.clone();
    let flip = |ex: &LabeledExample| {
        let class = a
            .label_tokens
            .iter()
            .position(|&t| t == ex.label_token)
            .expect("label belongs to task a");
        LabeledExample {
            tokens: ex.tokens.clone(),
            label_token: tokens[1 - class],
            task_name: b.spec.name.clone(),
        }
    };
    b.train = a.train.iter().map(flip).collect();
    b.eval = a.eval.iter().map(flip).collect();
    Ok(family)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskFileFormat {
    Tsv,
    Jsonl,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct JsonlExample {
    tokens: Vec<u32>,
    label: u32,
}

/// Writes a task pool (train then eval) to TSV or JSONL.
pub fn save_task_file(task: &Task, path: &Path, format: TaskFileFormat) -> Result<()> {
    let mut out = String::new();
    for ex in task.train.iter().chain(&task.eval) {
        match format {
            TaskFileFormat::Tsv => {
                let toks: Vec<String> = ex.tokens.iter().map(u32::to_string).collect();
                out.push_str(&format!("{}\t{}\n", toks.join(" "), ex.label_token));
            }
            TaskFileFormat::Jsonl => {
                out.push_str(&serde_json::to_string(&JsonlExample {
                    tokens: ex.tokens.clone(),
                    label: ex.label_token,
                })?);
                out.push('\n');
            }
        }
    }
    fs::File::create(path)
        .and_then(|mut fh| fh.write_all(out.as_bytes()))
        .map_err(Error::Io)
}

/// Loads a task from TSV (`tokens<TAB>label`) or JSONL
/// (`{"tokens": [...], "label": n}`); the task name is the file stem.
pub fn load_task_file(path: &Path, format: TaskFileFormat, vocab_size: usize) -> Result<Task> {
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("task")
        .to_string();
    let mut examples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (tokens, label) = match format {
            TaskFileFormat::Tsv => {
                let (toks, label) = line.split_once('\t').ok_or(Error::Parse {
                    line: lineno,
                    msg: "expected tokens<TAB>label".into(),
                })?;
                let tokens = toks
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<u32>().map_err(|e| Error::Parse {
                            line: lineno,
                            msg: format!("bad token '{t}': {e}"),
                        })
                    })
                    .collect::<Result<Vec<u32>>>()?;
                let label = label.trim().parse::<u32>().map_err(|e| Error::Parse {
                    line: lineno,
                    msg: format!("bad label '{label}': {e}"),
                })?;
                (tokens, label)
            }
            TaskFileFormat::Jsonl => {
                let parsed: JsonlExample =
                    serde_json::from_str(line).map_err(|e| Error::Parse {
                        line: lineno,
                        msg: e.to_string(),
                    })?;
                (parsed.tokens, parsed.label)
            }
        };
        for &t in tokens.iter().chain(std::iter::once(&label)) {
            if t as usize >= vocab_size {
                return Err(Error::Vocab(format!(
                    "line {lineno}: token {t} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        examples.push(LabeledExample {
            tokens,
            label_token: label,
            task_name: name.clone(),
        });
    }
    if examples.is_empty() {
        return Err(Error::Data(format!("{} holds no examples", path.display())));
    }
    let mut label_tokens: Vec<u32> = examples.iter().map(|e| e.label_token).collect();
    label_tokens.sort_unstable();
    label_tokens.dedup();
    Ok(Task {
        spec: TaskSpec {
            name,
            cluster_id: 0,
            num_classes: label_tokens.len(),
            label_scheme: LabelScheme::Natural,
            prefix_enabled: false,
            pool_size: examples.len(),
            seed: 0,
        },
        prefix_token: None,
        label_tokens,
        train: examples,
        eval: Vec::new(),
    })
}

/// Family manifest: task names, clusters, schemes, and seeds.
pub fn write_manifest(family: &TaskFamily, path: &Path) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Manifest<'a> {
        seed: u64,
        scheme: LabelScheme,
        prefixes: bool,
        tasks: Vec<&'a TaskSpec>,
    }
    let manifest = Manifest {
        seed: family.cfg.seed,
        scheme: family.cfg.scheme,
        prefixes: family.cfg.prefixes,
        tasks: family.tasks.iter().map(|t| &t.spec).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json).map_err(Error::Io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backbone() -> BackboneConfig {
        BackboneConfig::default()
    }

    fn default_family() -> TaskFamily {
        make_family(&FamilyConfig::default(), &backbone()).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = default_family();
        let b = default_family();
        for (ta, tb) in a.tasks.iter().zip(&b.tasks) {
            assert_eq!(ta.train, tb.train);
            assert_eq!(ta.eval, tb.eval);
        }
    }

    #[test]
    fn pools_are_balanced_and_sized() {
        let fam = default_family();
        for task in &fam.tasks {
            assert_eq!(task.train.len(), DEFAULT_POOL_SIZE);
            assert_eq!(task.eval.len(), DEFAULT_EVAL_SIZE);
            let mut counts = vec![0usize; task.spec.num_classes];
            for ex in &task.train {
                counts[task.class_of(ex).unwrap()] += 1;
            }
            let lo = *counts.iter().min().unwrap() as f64;
            let hi = *counts.iter().max().unwrap() as f64;
            assert!(
                (hi - lo) / task.train.len() as f64 <= 0.02,
                "class priors off: {counts:?}"
            );
        }
    }

    #[test]
    fn balanced_counts_round_robin() {
        assert_eq!(balanced_counts(32, 2), vec![16, 16]);
        assert_eq!(balanced_counts(32, 3), vec![11, 11, 10]);
    }

    #[test]
    fn prefix_tokens_are_reserved_and_disjoint() {
        let fam = default_family();
        for task in &fam.tasks {
            let prefix = task.prefix_token.unwrap();
            assert!((prefix as usize) < fam.layout.n_prefix);
            for ex in &task.train {
                assert_eq!(ex.tokens[0], prefix);
                for &t in &ex.tokens[1..] {
                    assert!(t >= fam.layout.content_base);
                }
                assert!(ex.label_token >= fam.layout.label_base);
                assert!((ex.label_token as usize) < fam.layout.content_base as usize);
            }
        }
    }

    #[test]
    fn label_schemes_follow_their_invariants() {
        let fam = default_family();

        let natural = apply_label_scheme(&fam, LabelScheme::Natural);
        assert_eq!(natural.tasks[0].label_tokens, natural.tasks[1].label_tokens);
        assert_ne!(natural.tasks[0].label_tokens, natural.tasks[2].label_tokens);

        let synthetic = apply_label_scheme(&fam, LabelScheme::Synthetic);
        for i in 0..synthetic.tasks.len() {
            for j in i + 1..synthetic.tasks.len() {
                for t in &synthetic.tasks[i].label_tokens {
                    assert!(
                        !synthetic.tasks[j].label_tokens.contains(t),
                        "synthetic labels must be disjoint"
                    );
                }
            }
        }

        let standardized = apply_label_scheme(&fam, LabelScheme::Standardized);
        for task in &standardized.tasks {
            assert_eq!(task.label_tokens, standardized.tasks[0].label_tokens);
        }

        // The class partition never moves.
        for (a, b) in fam.tasks.iter().zip(&standardized.tasks) {
            for (ea, eb) in a.train.iter().zip(&b.train) {
                assert_eq!(a.class_of(ea), b.class_of(eb));
                assert_eq!(ea.tokens, eb.tokens);
            }
        }
    }

    #[test]
    fn contradictory_pair_flips_every_label() {
        let fam = make_contradictory_pair(3, &backbone()).unwrap();
        let (a, b) = (&fam.tasks[0], &fam.tasks[1]);
        assert_eq!(a.train.len(), b.train.len());
        for (ea, eb) in a.train.iter().zip(&b.train) {
            assert_eq!(ea.tokens, eb.tokens, "input pools must be identical");
            assert_ne!(ea.label_token, eb.label_token);
            assert_eq!(
                a.class_of(ea).unwrap(),
                1 - b.class_of(eb).unwrap(),
                "labels must be opposite"
            );
        }
        assert!(!a.spec.prefix_enabled);

        let prefixed = with_prefixes(&fam, true);
        assert_eq!(prefixed.tasks[0].train[0].tokens[0], 0);
        assert_eq!(prefixed.tasks[1].train[0].tokens[0], 1);
        let stripped = with_prefixes(&prefixed, false);
        assert_eq!(stripped.tasks[0].train[0].tokens, fam.tasks[0].train[0].tokens);
    }

    #[test]
    fn vocab_overflow_is_a_config_error() {
        let cfg = FamilyConfig {
            n_clusters: 4,
            tasks_per_cluster: 4,
            ..FamilyConfig::default()
        };
        let small = BackboneConfig {
            vocab_size: 32,
            ..BackboneConfig::default()
        };
        assert!(matches!(make_family(&cfg, &small), Err(Error::Config(_))));
    }

    #[test]
    fn file_roundtrip_tsv_and_jsonl_agree() {
        let dir = tempfile::tempdir().unwrap();
        let fam = default_family();
        let task = &fam.tasks[0];

        let tsv = dir.path().join("c0t0.tsv");
        let jsonl = dir.path().join("c0t0.jsonl");
        save_task_file(task, &tsv, TaskFileFormat::Tsv).unwrap();
        save_task_file(task, &jsonl, TaskFileFormat::Jsonl).unwrap();

        let from_tsv = load_task_file(&tsv, TaskFileFormat::Tsv, 64).unwrap();
        let from_jsonl = load_task_file(&jsonl, TaskFileFormat::Jsonl, 64).unwrap();
        assert_eq!(from_tsv.train.len(), task.train.len() + task.eval.len());
        for ((a, b), original) in from_tsv
            .train
            .iter()
            .zip(&from_jsonl.train)
            .zip(task.train.iter().chain(&task.eval))
        {
            assert_eq!(a.tokens, original.tokens);
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.label_token, original.label_token);
            assert_eq!(a.label_token, b.label_token);
        }
    }

    #[test]
    fn malformed_line_is_cited() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.tsv");
        let mut content = String::new();
        for i in 0..6 {
            content.push_str(&format!("40 41\t{}\n", 8 + (i % 2)));
        }
        content.push_str("not-a-token 41\t8\n");
        std::fs::write(&path, content).unwrap();
        match load_task_file(&path, TaskFileFormat::Tsv, 64) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_vocab_token_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oov.tsv");
        std::fs::write(&path, "40 99\t8\n").unwrap();
        match load_task_file(&path, TaskFileFormat::Tsv, 64) {
            Err(Error::Vocab(msg)) => assert!(msg.contains("99"), "{msg}"),
            other => panic!("expected vocab error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_lists_tasks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        write_manifest(&default_family(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["tasks"].as_array().unwrap().len(), 4);
        assert_eq!(parsed["tasks"][3]["name"], "c1t1");
    }

    /// Logistic-regression probe oracle on the family's own feature map.
    fn probe_transfer(fam: &TaskFamily, from: usize, to: usize) -> f64 {
        let f = fam.cfg.feature_dim;
        let (src, dst) = (&fam.tasks[from], &fam.tasks[to]);
        let mut w = vec![0.0; f + 1];
        for _ in 0..400 {
            let mut grad = vec![0.0; f + 1];
            for ex in &src.train {
                let x = fam.example_feature(&ex.tokens);
                let y = src.class_of(ex).unwrap() as f64;
                let z: f64 = w[..f].iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() + w[f];
                let p = 1.0 / (1.0 + (-z).exp());
                for j in 0..f {
                    grad[j] += (p - y) * x[j];
                }
                grad[f] += p - y;
            }
            for (wj, gj) in w.iter_mut().zip(&grad) {
                *wj -= 2.0 * gj / src.train.len() as f64;
            }
        }
        let mut correct = 0usize;
        for ex in &dst.eval {
            let x = fam.example_feature(&ex.tokens);
            let z: f64 = w[..f].iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() + w[f];
            let pred = usize::from(z > 0.0);
            if pred == dst.class_of(ex).unwrap() {
                correct += 1;
            }
        }
        correct as f64 / dst.eval.len() as f64
    }

    #[test]
    fn cluster_structure_shows_in_probe_transfer() {
        let fam = default_family();
        let within = probe_transfer(&fam, 0, 1);
        let between = probe_transfer(&fam, 0, 2);
        assert!(within > 0.8, "within-cluster transfer too weak: {within}");
        assert!(between < 0.6, "between-cluster transfer too strong: {between}");
        assert!(
            within - between >= 0.2,
            "cluster fidelity gap too small: {within} vs {between}"
        );
    }
}
