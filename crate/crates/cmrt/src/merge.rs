//! Task-arithmetic algebra over checkpoints.
//!
//! An adapted model minus its shared starting point is a *task vector*; a
//! merged model is the starting point plus a scaled sum of task vectors,
//! `θ_merged = θ_base + Σ λ_i · τ_i`. With a shared λ = 1/N this reduces to
//! plain weight averaging. All arithmetic runs in double precision and
//! accumulates in a canonical order (vectors sorted by label), so a merge is
//! a pure function of its inputs — reordering the argument list cannot change
//! a single bit of the output.

use crate::checkpoint::Checkpoint;
use crate::tensor::TensorMap;
use crate::{Error, Result};

/// The seven shared scaling factors swept by default.
pub const DEFAULT_LAMBDAS: [f64; 7] = [0.1, 0.2, 0.25, 0.3, 0.5, 0.75, 1.0];

/// Element-wise parameter shift of one adapted model relative to the base it
/// started from.
#[derive(Debug, Clone)]
pub struct TaskVector {
    /// `adapted − base` per tensor, always double precision.
    pub deltas: TensorMap,
    /// Config digest of the base both models must share.
    pub base_digest: String,
    /// Name used for provenance and canonical merge ordering.
    pub source_label: String,
}

/// `adapted − base`, gated on matching config digests and congruent schemas.
pub fn task_vector(
    adapted: &Checkpoint,
    base: &Checkpoint,
    source_label: &str,
) -> Result<TaskVector> {
    if adapted.config_digest != base.config_digest {
        return Err(Error::DigestMismatch(format!(
            "cannot subtract checkpoints built for different configs ({} vs {})",
            adapted.config_digest, base.config_digest
        )));
    }
    if !adapted.params.congruent(&base.params) {
        return Err(Error::ShapeMismatch(
            "adapted and base checkpoints have different tensor schemas".into(),
        ));
    }
    let mut deltas = TensorMap::new();
    for (name, a) in adapted.params.iter() {
        let b = base.params.get(name)?;
        let values: Vec<f64> =
            a.to_f64_vec().iter().zip(b.to_f64_vec()).map(|(x, y)| x - y).collect();
        deltas.insert(name, crate::tensor::Tensor::from_f64(a.shape.clone(), values)?)?;
    }
    Ok(TaskVector {
        deltas,
        base_digest: base.config_digest.clone(),
        source_label: source_label.to_string(),
    })
}

/// A base checkpoint plus scaled task vectors to fold into it.
#[derive(Debug)]
pub struct MergeSpec<'a> {
    pub base: &'a Checkpoint,
    pub vectors: Vec<(&'a TaskVector, f64)>,
}

/// `θ_base + Σ λ_i · τ_i`, accumulated per element in ascending label order
/// and cast back to each base tensor's dtype. The result records the labels
/// and coefficients in its metadata.
pub fn merge_task_arithmetic(spec: &MergeSpec) -> Result<Checkpoint> {
    for (v, lambda) in &spec.vectors {
        if v.base_digest != spec.base.config_digest {
            return Err(Error::DigestMismatch(format!(
                "task vector {:?} was extracted from config {} but the base is {}",
                v.source_label, v.base_digest, spec.base.config_digest
            )));
        }
        if !v.deltas.congruent(&spec.base.params) {
            return Err(Error::ShapeMismatch(format!(
                "task vector {:?} is not congruent with the base schema",
                v.source_label
            )));
        }
        if !lambda.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite coefficient for task vector {:?}",
                v.source_label
            )));
        }
    }
    let mut ordered: Vec<&(&TaskVector, f64)> = spec.vectors.iter().collect();
    ordered.sort_by(|a, b| a.0.source_label.cmp(&b.0.source_label));
    for pair in ordered.windows(2) {
        if pair[0].0.source_label == pair[1].0.source_label {
            return Err(Error::InvalidInput(format!(
                "duplicate task-vector label {:?}",
                pair[0].0.source_label
            )));
        }
    }

    let mut params = TensorMap::new();
    for (name, base_tensor) in spec.base.params.iter() {
        let mut acc = base_tensor.to_f64_vec();
        for (v, lambda) in &ordered {
            for (a, d) in acc.iter_mut().zip(v.deltas.f64_slice(name)?) {
                *a += lambda * d;
            }
        }
        params.insert(name, base_tensor.with_values_cast(acc)?)?;
    }

    let mut out = Checkpoint::new(
        params,
        spec.base.config_digest.clone(),
        spec.base.step,
        "merged",
        spec.base.seed_record.clone(),
    );
    out.meta = spec.base.meta.clone();
    out.meta.insert("merge/count".into(), ordered.len().to_string());
    for (v, lambda) in &ordered {
        out.meta.insert(format!("merge/lambda/{}", v.source_label), format!("{lambda}"));
    }
    Ok(out)
}

/// Element-wise mean of the adapted checkpoints; algebraically the shared
/// λ = 1/N special case of task arithmetic over `base`.
pub fn weight_average(checkpoints: &[&Checkpoint], base: &Checkpoint) -> Result<Checkpoint> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidInput("weight averaging needs at least one checkpoint".into()));
    }
    for c in checkpoints {
        if c.config_digest != base.config_digest {
            return Err(Error::DigestMismatch(format!(
                "checkpoint config {} does not match base {}",
                c.config_digest, base.config_digest
            )));
        }
        if !c.params.congruent(&base.params) {
            return Err(Error::ShapeMismatch(
                "checkpoint schema does not match the base".into(),
            ));
        }
    }
    let inv = 1.0 / checkpoints.len() as f64;
    let mut params = TensorMap::new();
    for (name, base_tensor) in base.params.iter() {
        let mut acc = vec![0.0f64; base_tensor.len()];
        for c in checkpoints {
            for (a, x) in acc.iter_mut().zip(c.params.f64_slice(name)?) {
                *a += x;
            }
        }
        acc.iter_mut().for_each(|a| *a *= inv);
        params.insert(name, base_tensor.with_values_cast(acc)?)?;
    }
    let mut out = Checkpoint::new(
        params,
        base.config_digest.clone(),
        base.step,
        "merged",
        base.seed_record.clone(),
    );
    out.meta = base.meta.clone();
    out.meta.insert("merge/mode".into(), "weight_average".into());
    out.meta.insert("merge/count".into(), checkpoints.len().to_string());
    Ok(out)
}

/// One shared-λ merge per row, evaluated by a caller-supplied metric.
#[derive(Debug, Clone)]
pub struct SweepTable {
    /// Column names, one per task.
    pub task_names: Vec<String>,
    /// `(λ, metric per task)` in the order the lambdas were given.
    pub rows: Vec<(f64, Vec<f64>)>,
}

impl SweepTable {
    /// CSV with a `lambda` column followed by one column per task.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda");
        for t in &self.task_names {
            out.push(',');
            out.push_str(t);
        }
        out.push('\n');
        for (lambda, metrics) in &self.rows {
            out.push_str(&format!("{lambda}"));
            for m in metrics {
                out.push_str(&format!(",{m:.9}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Merge `base + λ·Στ_i` for each λ and tabulate `eval`'s per-task metrics.
/// `eval` must return one value per entry of `task_names`.
pub fn lambda_sweep(
    base: &Checkpoint,
    vectors: &[TaskVector],
    lambdas: &[f64],
    task_names: &[String],
    mut eval: impl FnMut(&Checkpoint) -> Result<Vec<f64>>,
) -> Result<SweepTable> {
    if lambdas.is_empty() {
        return Err(Error::InvalidInput("lambda sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let spec =
            MergeSpec { base, vectors: vectors.iter().map(|v| (v, lambda)).collect() };
        let merged = merge_task_arithmetic(&spec)?;
        let metrics = eval(&merged)?;
        if metrics.len() != task_names.len() {
            return Err(Error::InvalidInput(format!(
                "evaluation returned {} metrics for {} tasks",
                metrics.len(),
                task_names.len()
            )));
        }
        rows.push((lambda, metrics));
    }
    Ok(SweepTable { task_names: task_names.to_vec(), rows })
}
