//! The attention module: per-target-task logit rows over source prompts plus
//! an optional private slot, normalized with an adaptive softmax temperature
//! `tau = 1/M`, and target prompts assembled as the resulting convex
//! combination of the encoded slot prompts.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{matmul_slices, softmax_temp_slice, Tensor};

/// The nine named training configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConfigName {
    P,
    Pi,
    Sl,
    Sln,
    Slp,
    Slpn,
    Sil,
    Sip,
    Silp,
}

impl ConfigName {
    pub const ALL: [ConfigName; 9] = [
        ConfigName::P,
        ConfigName::Pi,
        ConfigName::Sl,
        ConfigName::Sln,
        ConfigName::Slp,
        ConfigName::Slpn,
        ConfigName::Sil,
        ConfigName::Sip,
        ConfigName::Silp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConfigName::P => "P",
            ConfigName::Pi => "PI",
            ConfigName::Sl => "SL",
            ConfigName::Sln => "SLN",
            ConfigName::Slp => "SLP",
            ConfigName::Slpn => "SLPN",
            ConfigName::Sil => "SIL",
            ConfigName::Sip => "SIP",
            ConfigName::Silp => "SILP",
        }
    }
}

impl std::fmt::Display for ConfigName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How source prompts are allocated in scratch configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sharing {
    /// SL/SLP: a single shared source prompt (unless the M sweep overrides).
    SingleShared,
    /// SLN/SLPN: one dedicated source prompt per target task. All sources
    /// stay visible to all tasks through the softmax; "dedicated" is an
    /// allocation, not a mask.
    PerTask,
}

/// Whether stage 2 starts from a fresh identity encoder or continues from the
/// stage-1 encoders (applied to the loaded embeddings at hand-off).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EncoderReuse {
    #[default]
    PerStage,
    Carryover,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositionConfig {
    pub name: ConfigName,
    pub use_source: bool,
    pub init_source: bool,
    pub learn_source: bool,
    pub use_private: bool,
    pub init_private: bool,
    /// Number of source prompts M. Zero for per-task or initialized schemes
    /// until [`CompositionConfig::resolve_sources`] binds it to a task set.
    pub num_sources: usize,
    pub sharing: Sharing,
    /// When set, the softmax temperature counts the private slot in M.
    pub tau_counts_private: bool,
    pub encoder_reuse: EncoderReuse,
}

/// Builds the exact flag tuple for one of the nine configuration names.
pub fn config_from_name(name: &str) -> Result<CompositionConfig> {
    let canon = name.trim().to_ascii_uppercase();
    let (name, use_source, init_source, learn_source, use_private, init_private) =
        match canon.as_str() {
            "P" => (ConfigName::P, false, false, false, true, false),
            "PI" => (ConfigName::Pi, false, false, false, true, true),
            "SL" => (ConfigName::Sl, true, false, true, false, false),
            "SLN" => (ConfigName::Sln, true, false, true, false, false),
            "SLP" => (ConfigName::Slp, true, false, true, true, false),
            "SLPN" => (ConfigName::Slpn, true, false, true, true, false),
            "SIL" => (ConfigName::Sil, true, true, true, false, false),
            "SIP" => (ConfigName::Sip, true, true, false, true, false),
            "SILP" => (ConfigName::Silp, true, true, true, true, false),
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration '{other}'; valid names: P, PI, SL, SLN, SLP, SLPN, SIL, SIP, SILP"
                )))
            }
        };
    let sharing = match name {
        ConfigName::Sln | ConfigName::Slpn => Sharing::PerTask,
        _ => Sharing::SingleShared,
    };
    let num_sources = match name {
        ConfigName::Sl | ConfigName::Slp => 1,
        _ => 0,
    };
    Ok(CompositionConfig {
        name,
        use_source,
        init_source,
        learn_source,
        use_private,
        init_private,
        num_sources,
        sharing,
        tau_counts_private: false,
        encoder_reuse: EncoderReuse::default(),
    })
}

impl CompositionConfig {
    /// Binds M to a task set: per-task sharing allocates one source per
    /// target task, initialized schemes use the pre-trained prompt count.
    pub fn resolve_sources(&mut self, n_source_prompts: usize, n_targets: usize) {
        if !self.use_source {
            self.num_sources = 0;
        } else if self.sharing == Sharing::PerTask {
            self.num_sources = n_targets;
        } else if self.init_source {
            self.num_sources = n_source_prompts;
        } // SL/SLP keep their configured M (default 1, sweepable).
    }

    /// M override for the source-count sweep (SL/SLP only).
    pub fn set_num_sources(&mut self, m: usize) -> Result<()> {
        if !self.use_source {
            return Err(Error::Config(format!(
                "{} has no source prompts to sweep",
                self.name
            )));
        }
        if m < 1 {
            return Err(Error::Config("source count M must be at least 1".into()));
        }
        self.num_sources = m;
        Ok(())
    }

    /// Slot count of one attention row.
    pub fn slots(&self) -> usize {
        self.num_sources + usize::from(self.use_private)
    }

    /// Softmax temperature `1/M`. M counts source prompts only unless
    /// `tau_counts_private` is set.
    pub fn temperature(&self) -> f64 {
        let m = if self.tau_counts_private {
            self.slots()
        } else {
            self.num_sources
        };
        1.0 / (m.max(1)) as f64
    }
}

/// Adaptive-temperature normalization of one logit row: softmax at `tau = 1/M`.
pub fn attention_weights(logits: &Tensor, num_sources: usize) -> Result<Tensor> {
    if num_sources == 0 {
        return Err(Error::Contract(
            "attention_weights requires at least one source prompt".into(),
        ));
    }
    logits.softmax_with_temperature(1.0 / num_sources as f64)
}

/// Learned per-target logits over `[sources..., private?]`.
#[derive(Clone, Debug)]
pub struct AttentionTable {
    pub logits: Param, // targets x slots
    pub num_targets: usize,
    pub num_sources: usize,
    pub has_private: bool,
    pub task_names: Vec<String>,
    pub source_names: Vec<String>,
}

impl AttentionTable {
    /// Zero-initialized logits: composition starts from uniform weights.
    pub fn new(task_names: &[String], source_names: &[String], has_private: bool) -> Self {
        let num_targets = task_names.len();
        let slots = source_names.len() + usize::from(has_private);
        Self {
            logits: Param::zeros(&[num_targets, slots]),
            num_targets,
            num_sources: source_names.len(),
            has_private,
            task_names: task_names.to_vec(),
            source_names: source_names.to_vec(),
        }
    }

    pub fn slots(&self) -> usize {
        self.num_sources + usize::from(self.has_private)
    }
}

/// Assembles the target prompt for task `t` as the attention-weighted convex
/// combination of the encoded slot prompts. With no sources the private
/// prompt passes through unchanged; with no private slot the combination
/// runs over sources alone.
pub fn compose_target(
    t: usize,
    sources: &[Tensor],
    private: Option<&Tensor>,
    table: Option<&Tensor>,
    cfg: &CompositionConfig,
) -> Result<Tensor> {
    if !cfg.use_source {
        return private
            .cloned()
            .ok_or_else(|| Error::Contract("configuration uses neither sources nor private".into()));
    }
    if sources.len() != cfg.num_sources {
        return Err(Error::Contract(format!(
            "configuration expects {} source prompts, got {}",
            cfg.num_sources,
            sources.len()
        )));
    }
    let private = match (cfg.use_private, private) {
        (true, Some(p)) => Some(p),
        (true, None) => {
            return Err(Error::Contract(
                "configuration uses a private prompt but none was given".into(),
            ))
        }
        (false, _) => None,
    };
    let mut slots: Vec<&Tensor> = sources.iter().collect();
    if let Some(p) = private {
        slots.push(p);
    }
    let base = slots[0].shape();
    if base.len() != 2 {
        return Err(Error::Dimension {
            op: "compose_target",
            lhs: base,
            rhs: vec![],
        });
    }
    for s in &slots {
        if s.shape() != base {
            return Err(Error::Dimension {
                op: "compose_target",
                lhs: base.clone(),
                rhs: s.shape(),
            });
        }
    }
    let table = table.ok_or_else(|| {
        Error::Contract("source composition requires an attention table".into())
    })?;
    let row = table.gather_rows(&[t])?.reshape(&[slots.len()])?;
    let weights = row.softmax_with_temperature(cfg.temperature())?;

    let (k, d) = (base[0], base[1]);
    let flat: Vec<Tensor> = slots
        .iter()
        .map(|s| s.reshape(&[1, k * d]))
        .collect::<Result<Vec<_>>>()?;
    let flat_refs: Vec<&Tensor> = flat.iter().collect();
    let stacked = Tensor::concat_rows(&flat_refs)?;
    weights
        .reshape(&[1, slots.len()])?
        .matmul(&stacked)?
        .reshape(&[k, d])
}

/// Inference-time weight matrix: one row per target task over the slot
/// columns `[source names..., private:<task> ...]`. Private weights sit in
/// their own task's column; other private columns are zero, so row sums stay
/// 1 and recomposition over all columns is bit-identical to training-time
/// composition.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    pub task_names: Vec<String>,
    pub slot_names: Vec<String>,
    pub num_sources: usize,
    pub rows: Vec<Vec<f64>>,
}

/// Applies the trained table once, yielding the stored matrix of the
/// inference path.
pub fn precompute_inference_weights(
    table: &AttentionTable,
    cfg: &CompositionConfig,
) -> WeightMatrix {
    let mut slot_names = table.source_names.clone();
    if table.has_private {
        for t in &table.task_names {
            slot_names.push(format!("private:{t}"));
        }
    }
    let logits = table.logits.values();
    let slots = table.slots();
    let tau = cfg.temperature();
    let mut rows = Vec::with_capacity(table.num_targets);
    for t in 0..table.num_targets {
        let w = softmax_temp_slice(&logits[t * slots..(t + 1) * slots], tau);
        let mut row = vec![0.0; slot_names.len()];
        row[..table.num_sources].copy_from_slice(&w[..table.num_sources]);
        if table.has_private {
            row[table.num_sources + t] = w[table.num_sources];
        }
        rows.push(row);
    }
    WeightMatrix {
        task_names: table.task_names.clone(),
        slot_names,
        num_sources: table.num_sources,
        rows,
    }
}

/// The implicit weight matrix of private-only configurations: full mass on
/// each task's own private prompt.
pub fn private_only_weights(task_names: &[String]) -> WeightMatrix {
    let slot_names: Vec<String> = task_names
        .iter()
        .map(|t| format!("private:{t}"))
        .collect();
    let rows = (0..task_names.len())
        .map(|t| {
            let mut row = vec![0.0; task_names.len()];
            row[t] = 1.0;
            row
        })
        .collect();
    WeightMatrix {
        task_names: task_names.to_vec(),
        slot_names,
        num_sources: 0,
        rows,
    }
}

impl WeightMatrix {
    /// Recomposes task `t` from slot prompt values (each `k*d` long, ordered
    /// as `slot_names`). Uses the same kernel as the tape path.
    pub fn compose_values(&self, t: usize, slot_values: &[Vec<f64>]) -> Result<Vec<f64>> {
        if slot_values.len() != self.slot_names.len() {
            return Err(Error::Contract(format!(
                "expected {} slot prompts, got {}",
                self.slot_names.len(),
                slot_values.len()
            )));
        }
        let width = slot_values.first().map_or(0, Vec::len);
        let mut stacked = Vec::with_capacity(slot_values.len() * width);
        for v in slot_values {
            if v.len() != width {
                return Err(Error::Contract("slot prompts differ in size".into()));
            }
            stacked.extend_from_slice(v);
        }
        Ok(matmul_slices(
            &self.rows[t],
            &stacked,
            1,
            slot_values.len(),
            width,
        ))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("task");
        for s in &self.slot_names {
            out.push(',');
            out.push_str(s);
        }
        out.push('\n');
        for (name, row) in self.task_names.iter().zip(&self.rows) {
            out.push_str(name);
            for w in row {
                out.push_str(&format!(",{w:.6}"));
            }
            out.push('\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::Export(format!("writing {}: {e}", path.display())))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Format("empty weight matrix csv".into()))?;
        let slot_names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let mut task_names = Vec::new();
        let mut rows = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let name = fields
                .next()
                .ok_or(Error::Parse {
                    line: idx + 1,
                    msg: "missing task name".into(),
                })?
                .to_string();
            let row = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|e| Error::Parse {
                        line: idx + 1,
                        msg: format!("bad weight '{f}': {e}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != slot_names.len() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected {} weights, got {}", slot_names.len(), row.len()),
                });
            }
            task_names.push(name);
            rows.push(row);
        }
        let num_sources = slot_names
            .iter()
            .take_while(|s| !s.starts_with("private:"))
            .count();
        Ok(Self {
            task_names,
            slot_names,
            num_sources,
            rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tape};
    use proptest::prelude::*;

    fn leaf(tape: &Tape, shape: &[usize], v: Vec<f64>) -> Tensor {
        tape.leaf(shape, v, false).unwrap()
    }

    #[test]
    fn table_one_rows_are_exact() {
        let silp = config_from_name("SILP").unwrap();
        assert!(silp.use_source && silp.init_source && silp.learn_source);
        assert!(silp.use_private && !silp.init_private);

        let p = config_from_name("p").unwrap();
        assert!(!p.use_source && p.use_private && !p.init_private);
        assert_eq!(p.num_sources, 0);

        let sip = config_from_name("SIP").unwrap();
        assert!(sip.use_source && sip.init_source && !sip.learn_source);
        assert!(sip.use_private);

        let pi = config_from_name("PI").unwrap();
        assert!(pi.init_private && !pi.use_source);

        let sln = config_from_name("SLN").unwrap();
        assert_eq!(sln.sharing, Sharing::PerTask);
        assert!(!sln.use_private);

        let err = config_from_name("XQ").unwrap_err().to_string();
        assert!(err.contains("SILP") && err.contains("SLPN"), "{err}");
    }

    #[test]
    fn resolve_sources_binds_m() {
        let mut sln = config_from_name("SLN").unwrap();
        sln.resolve_sources(0, 5);
        assert_eq!(sln.num_sources, 5);

        let mut sil = config_from_name("SIL").unwrap();
        sil.resolve_sources(3, 5);
        assert_eq!(sil.num_sources, 3);

        let mut sl = config_from_name("SL").unwrap();
        sl.resolve_sources(0, 5);
        assert_eq!(sl.num_sources, 1);
        sl.set_num_sources(4).unwrap();
        assert_eq!(sl.num_sources, 4);
        assert!(sl.set_num_sources(0).is_err());
        assert!(config_from_name("P").unwrap().set_num_sources(2).is_err());
    }

    #[test]
    fn attention_weights_closed_forms() {
        let tape = Tape::new();
        let even = leaf(&tape, &[2], vec![0.0, 0.0]);
        let w = attention_weights(&even, 1).unwrap().values();
        assert_eq!(w, vec![0.5, 0.5]);

        let z = leaf(&tape, &[2], vec![1.0, 0.0]);
        let w1 = attention_weights(&z, 1).unwrap().values();
        assert!((w1[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((w1[1] - 0.268_941_421_369_995_1).abs() < 1e-12);

        // tau = 1/4 sharpens: e^4/(e^4+1) and 1/(e^4+1).
        let w4 = attention_weights(&z, 4).unwrap().values();
        assert!((w4[0] - 0.982_013_790_037_908_4).abs() < 1e-9);
        assert!((w4[1] - 0.017_986_209_962_091_6).abs() < 1e-9);
        assert!(w4[0] > w1[0]);

        assert!(attention_weights(&z, 0).is_err());
    }

    proptest! {
        #[test]
        fn argmax_mass_increases_with_source_count(seed in 0_u64..500) {
            let mut rng = crate::rng::stream(seed, "tau-adapt");
            let mut z = crate::rng::gaussian_vec(&mut rng, 5, 1.0);
            // Make entries distinct to pin a unique argmax.
            for (i, v) in z.iter_mut().enumerate() {
                *v += i as f64 * 1e-6;
            }
            let tape = Tape::new();
            let zt = tape.leaf(&[5], z, false).unwrap();
            let mut prev = 0.0;
            for m in 1..=6 {
                let w = attention_weights(&zt, m).unwrap().values();
                let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(max > prev - 1e-12);
                prev = max;
            }
        }

        #[test]
        fn composition_stays_in_the_convex_hull(seed in 0_u64..300) {
            let mut rng = crate::rng::stream(seed, "hull");
            let tape = Tape::new();
            let s1 = tape.leaf(&[2, 3], crate::rng::gaussian_vec(&mut rng, 6, 1.0), false).unwrap();
            let s2 = tape.leaf(&[2, 3], crate::rng::gaussian_vec(&mut rng, 6, 1.0), false).unwrap();
            let pu = tape.leaf(&[2, 3], crate::rng::gaussian_vec(&mut rng, 6, 1.0), false).unwrap();
            let z = tape.leaf(&[1, 3], crate::rng::gaussian_vec(&mut rng, 3, 2.0), false).unwrap();
            let mut cfg = config_from_name("SLP").unwrap();
            cfg.set_num_sources(2).unwrap();
            let out = compose_target(0, &[s1.clone(), s2.clone()], Some(&pu), Some(&z), &cfg)
                .unwrap()
                .values();
            let (v1, v2, v3) = (s1.values(), s2.values(), pu.values());
            for i in 0..out.len() {
                let lo = v1[i].min(v2[i]).min(v3[i]);
                let hi = v1[i].max(v2[i]).max(v3[i]);
                prop_assert!(out[i] >= lo - 1e-12 && out[i] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn single_source_no_private_is_identity() {
        let tape = Tape::new();
        let src = leaf(&tape, &[2, 2], vec![0.1, -0.4, 2.0, 3.5]);
        let z = leaf(&tape, &[1, 1], vec![1.7]);
        let cfg = config_from_name("SL").unwrap();
        let out = compose_target(0, &[src.clone()], None, Some(&z), &cfg).unwrap();
        assert_eq!(out.values(), src.values());
    }

    #[test]
    fn identical_sources_compose_to_themselves() {
        let tape = Tape::new();
        let v = vec![0.5, 1.5, -2.0, 0.25];
        let s1 = leaf(&tape, &[2, 2], v.clone());
        let s2 = leaf(&tape, &[2, 2], v.clone());
        let z = leaf(&tape, &[1, 2], vec![0.3, -1.2]);
        let mut cfg = config_from_name("SL").unwrap();
        cfg.set_num_sources(2).unwrap();
        let out = compose_target(0, &[s1, s2], None, Some(&z), &cfg).unwrap();
        for (o, e) in out.values().iter().zip(&v) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_convex_combination() {
        // Weights [0.25, 0.75] over all-zeros and all-ones -> all entries 0.75.
        // softmax(z/tau) with tau=1 (one source + private) hits [0.25, 0.75]
        // at z = [0, ln 3].
        let tape = Tape::new();
        let zeros = leaf(&tape, &[2, 2], vec![0.0; 4]);
        let ones = leaf(&tape, &[2, 2], vec![1.0; 4]);
        let z = leaf(&tape, &[1, 2], vec![0.0, 3.0_f64.ln()]);
        let cfg = config_from_name("SLP").unwrap();
        let out = compose_target(0, &[zeros], Some(&ones), Some(&z), &cfg).unwrap();
        for v in out.values() {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn private_pass_through_without_sources() {
        let tape = Tape::new();
        let pu = leaf(&tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let cfg = config_from_name("P").unwrap();
        let out = compose_target(0, &[], Some(&pu), None, &cfg).unwrap();
        assert_eq!(out.values(), pu.values());
        assert_eq!(out.shape(), vec![2, 2]);
    }

    #[test]
    fn missing_private_and_shape_mismatch_are_errors() {
        let tape = Tape::new();
        let src = leaf(&tape, &[2, 2], vec![0.0; 4]);
        let z = leaf(&tape, &[1, 2], vec![0.0, 0.0]);
        let cfg = config_from_name("SLP").unwrap();
        assert!(matches!(
            compose_target(0, &[src.clone()], None, Some(&z), &cfg),
            Err(Error::Contract(_))
        ));
        let odd = leaf(&tape, &[3, 2], vec![0.0; 6]);
        assert!(matches!(
            compose_target(0, &[src], Some(&odd), Some(&z), &cfg),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn composition_gradient_reaches_the_table() {
        let mut rng = crate::rng::stream(5, "dz");
        let s1v = crate::rng::gaussian_vec(&mut rng, 6, 1.0);
        let s2v = crate::rng::gaussian_vec(&mut rng, 6, 1.0);
        let puv = crate::rng::gaussian_vec(&mut rng, 6, 1.0);
        let z0 = crate::rng::gaussian_vec(&mut rng, 3, 1.0);
        let mut cfg = config_from_name("SLP").unwrap();
        cfg.set_num_sources(2).unwrap();
        let err = finite_diff_check(
            |tape, z| {
                let s1 = tape.leaf(&[2, 3], s1v.clone(), false)?;
                let s2 = tape.leaf(&[2, 3], s2v.clone(), false)?;
                let pu = tape.leaf(&[2, 3], puv.clone(), false)?;
                let z = z.reshape(&[1, 3])?;
                let out = compose_target(0, &[s1, s2], Some(&pu), Some(&z), &cfg)?;
                Ok(out.mul(&out)?.sum())
            },
            &[3],
            &z0,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "dLoss/dZ error {err}");
    }

    #[test]
    fn precomputed_weights_recompose_bit_exactly() {
        let task_names = vec!["a".to_string(), "b".to_string()];
        let source_names = vec!["s0".to_string(), "s1".to_string()];
        let table = AttentionTable::new(&task_names, &source_names, true);
        table
            .logits
            .set_values(vec![0.3, -0.7, 1.1, 0.0, 0.4, -0.2])
            .unwrap();
        let mut cfg = config_from_name("SLP").unwrap();
        cfg.set_num_sources(2).unwrap();

        let matrix = precompute_inference_weights(&table, &cfg);
        assert_eq!(
            matrix.slot_names,
            vec!["s0", "s1", "private:a", "private:b"]
        );
        for row in &matrix.rows {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }

        let mut rng = crate::rng::stream(8, "recompose");
        let s0 = crate::rng::gaussian_vec(&mut rng, 6, 1.0);
        let s1 = crate::rng::gaussian_vec(&mut rng, 6, 1.0);
        let pa = crate::rng::gaussian_vec(&mut rng, 6, 1.0);
        let pb = crate::rng::gaussian_vec(&mut rng, 6, 1.0);

        for (t, own_private) in [(0, &pa), (1, &pb)] {
            let tape = Tape::new();
            let st0 = tape.leaf(&[2, 3], s0.clone(), false).unwrap();
            let st1 = tape.leaf(&[2, 3], s1.clone(), false).unwrap();
            let pu = tape.leaf(&[2, 3], (*own_private).clone(), false).unwrap();
            let zt = tape.leaf(&[2, 3], table.logits.values(), false).unwrap();
            let live = compose_target(t, &[st0, st1], Some(&pu), Some(&zt), &cfg)
                .unwrap()
                .values();
            let from_matrix = matrix
                .compose_values(t, &[s0.clone(), s1.clone(), pa.clone(), pb.clone()])
                .unwrap();
            assert_eq!(live, from_matrix, "task {t} recomposition differs");
        }
    }

    #[test]
    fn weight_csv_roundtrip_preserves_compositions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.csv");
        let task_names = vec!["a".to_string(), "b".to_string()];
        let source_names = vec!["s0".to_string()];
        let table = AttentionTable::new(&task_names, &source_names, true);
        table
            .logits
            .set_values(vec![0.9, -0.4, -1.3, 0.6])
            .unwrap();
        let cfg = config_from_name("SLP").unwrap();
        let matrix = precompute_inference_weights(&table, &cfg);
        matrix.save_csv(&path).unwrap();
        let reloaded = WeightMatrix::load_csv(&path).unwrap();
        assert_eq!(reloaded.task_names, matrix.task_names);
        assert_eq!(reloaded.slot_names, matrix.slot_names);
        assert_eq!(reloaded.num_sources, 1);

        let mut rng = crate::rng::stream(12, "csv");
        let slots: Vec<Vec<f64>> = (0..3)
            .map(|_| crate::rng::gaussian_vec(&mut rng, 4, 1.0))
            .collect();
        for t in 0..2 {
            let a = matrix.compose_values(t, &slots).unwrap();
            let b = reloaded.compose_values(t, &slots).unwrap();
            for (x, y) in a.iter().zip(&b) {
                // 6-decimal CSV rounding bounds the drift.
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn private_only_matrix_is_an_identity() {
        let names = vec!["a".into(), "b".into(), "c".into()];
        let m = private_only_weights(&names);
        assert_eq!(m.rows[1], vec![0.0, 1.0, 0.0]);
        assert_eq!(m.slot_names[2], "private:c");
    }
}
