//! Teacher and student training, model files and the five-variant ablation.
//!
//! The teacher is an MLP on note embeddings trained with BCE, then frozen; its
//! logits for the training split are exported once and read by every student.
//! A student is an MLP encoder on structured features with a linear classifier
//! head and a projection head for contrastive alignment. The note side of the
//! alignment is a trainable linear projection of the note embedding that only
//! exists during training, so deployed students never touch notes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{CodeVectorTable, Cohort, PatientRecord, Split, StructuredEncoder};
use crate::losses::{combined_loss, CombinedInputs, ContrastiveBatch, LossWeights};
use crate::metrics::{evaluate, EvalReport, ScoredSet};
use crate::numerics::{
    adam_step, mlp_backward, mlp_backward_with_input, sigmoid, Activation, AdamConfig, AdamState,
    Matrix, MlpGradients, MlpParams, MlpSpec, SeededRng,
};

// Sub-stream indices of the run seed.
const STREAM_HOLDOUT: u64 = 1;
const STREAM_TEACHER_INIT: u64 = 2;
const STREAM_ENCODER_INIT: u64 = 3;
const STREAM_CLASSIFIER_INIT: u64 = 4;
const STREAM_PROJECTION_INIT: u64 = 5;
const STREAM_NOTE_PROJECTION_INIT: u64 = 6;
const STREAM_EPOCH_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantSpec {
    Teacher,
    CckdStudent,
    ContrastiveOnly,
    CkdOnly,
    #[serde(rename = "ehr_only")]
    EhrDataOnly,
}

impl VariantSpec {
    pub const ALL: [VariantSpec; 5] = [
        VariantSpec::Teacher,
        VariantSpec::CckdStudent,
        VariantSpec::ContrastiveOnly,
        VariantSpec::CkdOnly,
        VariantSpec::EhrDataOnly,
    ];

    /// Identifier used in files and on the command line.
    pub fn key(self) -> &'static str {
        match self {
            VariantSpec::Teacher => "teacher",
            VariantSpec::CckdStudent => "cckd_student",
            VariantSpec::ContrastiveOnly => "contrastive_only",
            VariantSpec::CkdOnly => "ckd_only",
            VariantSpec::EhrDataOnly => "ehr_only",
        }
    }

    /// Row label for reports.
    pub fn display_name(self) -> &'static str {
        match self {
            VariantSpec::Teacher => "Teacher",
            VariantSpec::CckdStudent => "C-CKD Student",
            VariantSpec::ContrastiveOnly => "Contrastive",
            VariantSpec::CkdOnly => "CKD",
            VariantSpec::EhrDataOnly => "EHR-only",
        }
    }

    pub fn is_student(self) -> bool {
        self != VariantSpec::Teacher
    }

    pub fn training_modalities(self, teacher_uses_structured: bool) -> &'static str {
        match self {
            VariantSpec::Teacher if teacher_uses_structured => "Structured EHR + Notes",
            VariantSpec::Teacher => "Notes",
            VariantSpec::EhrDataOnly => "Structured EHR",
            _ => "Structured EHR + Notes",
        }
    }

    pub fn deployment_modalities(self, teacher_uses_structured: bool) -> &'static str {
        match self {
            VariantSpec::Teacher if teacher_uses_structured => "Structured EHR + Notes",
            VariantSpec::Teacher => "Notes",
            _ => "Structured EHR",
        }
    }

    /// Loss template: the variant keeps its own terms from `base` and zeroes
    /// the rest. Teacher and EHR-only always train on BCE with weight 1.
    pub fn loss_weights(self, base: &LossWeights) -> LossWeights {
        let b = *base;
        match self {
            VariantSpec::Teacher | VariantSpec::EhrDataOnly => b.with_lambdas(0.0, 0.0, 1.0),
            VariantSpec::CckdStudent => {
                let (k, c, l) = (b.lambda_ckd, b.lambda_contrastive, b.lambda_bce);
                b.with_lambdas(k, c, l)
            }
            VariantSpec::ContrastiveOnly => {
                let (c, l) = (b.lambda_contrastive, b.lambda_bce);
                b.with_lambdas(0.0, c, l)
            }
            VariantSpec::CkdOnly => {
                let k = b.lambda_ckd;
                b.with_lambdas(k, 0.0, 0.0)
            }
        }
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "teacher" => Ok(VariantSpec::Teacher),
            "cckd" | "cckd_student" | "c_ckd" => Ok(VariantSpec::CckdStudent),
            "contrastive" | "contrastive_only" => Ok(VariantSpec::ContrastiveOnly),
            "ckd" | "ckd_only" => Ok(VariantSpec::CkdOnly),
            "ehr" | "ehr_only" | "ehr_data_only" => Ok(VariantSpec::EhrDataOnly),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected teacher, cckd_student, contrastive_only, ckd_only or ehr_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Share of training records held out for early stopping; 0 disables it.
    pub validation_fraction: f64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub projection_dim: usize,
    /// Feed the teacher structured features alongside note embeddings.
    pub teacher_uses_structured: bool,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            patience: 10,
            validation_fraction: 0.1,
            seed: 0,
            hidden_dims: vec![128, 64],
            projection_dim: 32,
            teacher_uses_structured: false,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and ≥ 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 0.5), got {}",
                self.validation_fraction
            )));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims must be non-empty and positive".into()));
        }
        if self.projection_dim == 0 {
            return Err(Error::Config("projection_dim must be at least 1".into()));
        }
        self.loss.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Patient id → frozen teacher logit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherLogitTable {
    logits: BTreeMap<String, f64>,
}

impl TeacherLogitTable {
    pub fn new(logits: BTreeMap<String, f64>) -> Result<Self> {
        if let Some((id, v)) = logits.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numeric(format!("teacher logit for {id:?} is {v}")));
        }
        Ok(Self { logits })
    }

    pub fn get(&self, patient_id: &str) -> Option<f64> {
        self.logits.get(patient_id).copied()
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &f64)> {
        self.logits.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut f64)> {
        self.logits.iter_mut()
    }

    /// CSV `patient_id,logit`, shortest round-trip float formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["patient_id", "logit"])
            .map_err(|e| csv_error(path, e))?;
        for (id, v) in &self.logits {
            w.write_record([id.as_str(), &v.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut logits = BTreeMap::new();
        for (i, row) in r.records().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| csv_error(path, e))?;
            let parse_err = |message: String| Error::Parse {
                path: path.display().to_string(),
                line,
                message,
            };
            if row.len() != 2 {
                return Err(parse_err(format!("expected 2 fields, got {}", row.len())));
            }
            let v: f64 = row[1]
                .parse()
                .map_err(|e| parse_err(format!("bad logit {:?}: {e}", &row[1])))?;
            if logits.insert(row[0].to_string(), v).is_some() {
                return Err(parse_err(format!("duplicate patient_id {:?}", &row[0])));
            }
        }
        Self::new(logits)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.display().to_string(),
            line,
            message: format!("{other:?}"),
        },
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub best_validation_loss: Option<f64>,
    /// Mean training loss of each epoch.
    pub train_loss_history: Vec<f64>,
}

impl TrainingMeta {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.train_loss_history.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherModel {
    pub network: MlpParams,
    pub note_width: usize,
    /// Present when the teacher also reads structured features.
    pub structured: Option<StructuredEncoder>,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    pub variant: VariantSpec,
    /// Feature assembly and demographic standardization fitted on the train split.
    pub features: StructuredEncoder,
    pub encoder: MlpParams,
    pub classifier: MlpParams,
    pub projection: MlpParams,
    pub meta: TrainingMeta,
}

/// A model file: either kind, tagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Teacher(TeacherModel),
    Student(StudentModel),
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("models serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Probabilities for `records`, reading only the modalities the model was
    /// trained to deploy on.
    pub fn predict_records(&self, records: &[&PatientRecord], table: &CodeVectorTable) -> Result<Vec<f64>> {
        match self {
            Model::Teacher(t) => t.predict_records(records, table),
            Model::Student(s) => s.predict_records(records, table),
        }
    }
}

fn probabilities(logits: Matrix) -> Vec<f64> {
    logits.into_data().into_iter().map(sigmoid).collect()
}

impl TeacherModel {
    pub fn input_width(&self) -> usize {
        self.network.input_dim()
    }

    /// Rows of note embeddings (plus structured features when configured).
    pub fn inputs(&self, records: &[&PatientRecord], table: &CodeVectorTable) -> Result<Matrix> {
        teacher_inputs(records, table, self.note_width, self.structured.as_ref())
    }

    pub fn logits(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        Ok(self.network.predict(inputs)?.into_data())
    }

    /// σ of the classifier logit; `inputs` must have the teacher's input width.
    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        Ok(probabilities(self.network.predict(inputs)?))
    }

    pub fn predict_records(&self, records: &[&PatientRecord], table: &CodeVectorTable) -> Result<Vec<f64>> {
        self.predict(&self.inputs(records, table)?)
    }
}

impl StudentModel {
    pub fn input_width(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn logits(&self, features: &Matrix) -> Result<Vec<f64>> {
        let h = self.encoder.predict(features)?;
        Ok(self.classifier.predict(&h)?.into_data())
    }

    /// σ of the classifier logit on assembled structured features.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<f64>> {
        let h = self.encoder.predict(features)?;
        Ok(probabilities(self.classifier.predict(&h)?))
    }

    /// Scores records from demographics and codes only; note embeddings are
    /// never read.
    pub fn predict_records(&self, records: &[&PatientRecord], table: &CodeVectorTable) -> Result<Vec<f64>> {
        self.predict(&self.features.encode_all(records, table)?)
    }
}

fn teacher_inputs(
    records: &[&PatientRecord],
    table: &CodeVectorTable,
    note_width: usize,
    structured: Option<&StructuredEncoder>,
) -> Result<Matrix> {
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let note = r.note_emb.as_ref().ok_or_else(|| {
            Error::validation(format!(
                "the teacher reads note embeddings, but patient {:?} has none",
                r.patient_id
            ))
        })?;
        if note.len() != note_width {
            return Err(Error::invalid(format!(
                "note embedding width mismatch: model expects {note_width}, patient {:?} has {}",
                r.patient_id,
                note.len()
            )));
        }
        let mut row = note.clone();
        if let Some(enc) = structured {
            row.extend(enc.encode(r, table)?);
        }
        rows.push(row);
    }
    let width = note_width + structured.map_or(0, StructuredEncoder::width);
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, width));
    }
    Matrix::from_rows(&rows)
}

fn note_matrix(records: &[&PatientRecord]) -> Result<Matrix> {
    let rows = records
        .iter()
        .map(|r| {
            r.note_emb.clone().ok_or_else(|| {
                Error::validation(format!(
                    "contrastive training needs note embeddings, but training patient {:?} has none",
                    r.patient_id
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

fn labels_of(records: &[&PatientRecord]) -> Vec<f64> {
    records.iter().map(|r| f64::from(r.label)).collect()
}

/// Something the shared epoch loop can optimize.
trait Learner: Clone {
    /// Batch loss followed by one optimizer step.
    fn step(&mut self, batch: &[usize]) -> Result<f64>;
    /// Batch loss without updating.
    fn loss(&self, batch: &[usize]) -> Result<f64>;
}

/// Splits `order` into batches; a trailing batch of one is dropped when
/// in-batch pairs are needed.
fn batches(order: &[usize], size: usize, needs_pairs: bool) -> Vec<&[usize]> {
    order
        .chunks(size)
        .filter(|b| !(needs_pairs && b.len() < 2))
        .collect()
}

fn mean_loss<L: Learner>(learner: &L, batches: &[&[usize]]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for b in batches {
        total += learner.loss(b)? * b.len() as f64;
        count += b.len();
    }
    Ok(total / count as f64)
}

/// Seeded holdout of `validation_fraction` of `0..n`; returns (fit, validation).
fn holdout(n: usize, cfg: &TrainConfig, root: &SeededRng) -> (Vec<usize>, Vec<usize>) {
    let n_val = (cfg.validation_fraction * n as f64).round() as usize;
    let mut order = root.derive(STREAM_HOLDOUT).permutation(n);
    let fit = order.split_off(n_val);
    let mut val = order;
    val.sort_unstable();
    let mut fit = fit;
    fit.sort_unstable();
    (fit, val)
}

fn fit<L: Learner>(
    learner: &mut L,
    n: usize,
    needs_pairs: bool,
    cfg: &TrainConfig,
    root: &SeededRng,
) -> Result<TrainingMeta> {
    let (fit_idx, val_idx) = holdout(n, cfg, root);
    let min = if needs_pairs { 2 } else { 1 };
    if fit_idx.len() < min {
        return Err(Error::Config(format!(
            "{} training records remain after the validation holdout; at least {min} needed",
            fit_idx.len()
        )));
    }
    if !val_idx.is_empty() && val_idx.len() < min {
        return Err(Error::Config(format!(
            "validation holdout has {} record(s); at least {min} needed",
            val_idx.len()
        )));
    }
    let val_batches = batches(&val_idx, cfg.batch_size, needs_pairs);

    let mut meta = TrainingMeta::default();
    let mut best: Option<(f64, L)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let mut order = fit_idx.clone();
        root.derive(STREAM_EPOCH_BASE + epoch as u64).shuffle(&mut order);
        let (mut total, mut count) = (0.0, 0usize);
        for b in batches(&order, cfg.batch_size, needs_pairs) {
            total += learner.step(b)? * b.len() as f64;
            count += b.len();
        }
        let train_loss = total / count as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!("training loss is {train_loss} at epoch {}", epoch + 1)));
        }
        meta.train_loss_history.push(train_loss);
        meta.epochs_run = epoch + 1;
        if val_batches.is_empty() {
            meta.best_epoch = epoch + 1;
            continue;
        }
        let val_loss = mean_loss(learner, &val_batches)?;
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, learner.clone()));
            meta.best_epoch = epoch + 1;
            meta.best_validation_loss = Some(val_loss);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, kept)) = best {
        *learner = kept;
    }
    Ok(meta)
}

#[derive(Clone)]
struct TeacherLearner<'a> {
    inputs: &'a Matrix,
    labels: &'a [f64],
    weights: LossWeights,
    network: MlpParams,
    adam: AdamState,
}

impl TeacherLearner<'_> {
    fn batch(&self, idx: &[usize], with_grads: bool) -> Result<(f64, Option<MlpGradients>)> {
        let xb = self.inputs.select_rows(idx);
        let (cache, out) = self.network.forward(&xb)?;
        let labels: Vec<f64> = idx.iter().map(|&i| self.labels[i]).collect();
        let res = combined_loss(
            CombinedInputs {
                student_logits: out.data(),
                teacher_logits: None,
                labels: Some(&labels),
                contrastive: None,
            },
            &self.weights,
        )?;
        if !with_grads {
            return Ok((res.loss, None));
        }
        let d = Matrix::from_vec(idx.len(), 1, res.d_student_logits)?;
        Ok((res.loss, Some(mlp_backward(&self.network, &cache, &d)?)))
    }
}

impl Learner for TeacherLearner<'_> {
    fn step(&mut self, idx: &[usize]) -> Result<f64> {
        let (loss, grads) = self.batch(idx, true)?;
        adam_step(&mut self.network, &grads.expect("gradients requested"), &mut self.adam)?;
        Ok(loss)
    }

    fn loss(&self, idx: &[usize]) -> Result<f64> {
        Ok(self.batch(idx, false)?.0)
    }
}

/// Trains the note-embedding teacher on the train split and exports its
/// logits for every training patient.
pub fn train_teacher(cohort: &Cohort, cfg: &TrainConfig) -> Result<(TeacherModel, TeacherLogitTable)> {
    cfg.validate()?;
    let train = cohort.split(Split::Train);
    if train.is_empty() {
        return Err(Error::validation("cohort has no training records"));
    }
    let note_width = cohort
        .note_width()
        .ok_or_else(|| Error::validation("cohort has no note embeddings to train the teacher on"))?;
    let structured = if cfg.teacher_uses_structured {
        Some(StructuredEncoder::fit(cohort)?)
    } else {
        None
    };
    let inputs = teacher_inputs(&train, &cohort.table, note_width, structured.as_ref())?;
    let labels = labels_of(&train);

    let root = SeededRng::new(cfg.seed);
    let mut dims = vec![inputs.cols()];
    dims.extend(&cfg.hidden_dims);
    dims.push(1);
    let network = MlpParams::init(
        MlpSpec::new(dims, Activation::Relu),
        &mut root.derive(STREAM_TEACHER_INIT),
    )?;
    let mut learner = TeacherLearner {
        inputs: &inputs,
        labels: &labels,
        weights: VariantSpec::Teacher.loss_weights(&cfg.loss),
        adam: AdamState::for_mlp(&network, cfg.adam()),
        network,
    };
    let meta = fit(&mut learner, train.len(), false, cfg, &root)?;

    let model = TeacherModel {
        network: learner.network,
        note_width,
        structured,
        meta,
    };
    let logits = model.logits(&inputs)?;
    let table = TeacherLogitTable::new(
        train
            .iter()
            .zip(logits)
            .map(|(r, l)| (r.patient_id.clone(), l))
            .collect(),
    )?;
    Ok((model, table))
}

struct StudentGrads {
    encoder: MlpGradients,
    classifier: MlpGradients,
    aligned: Option<(MlpGradients, MlpGradients)>,
}

#[derive(Clone)]
struct StudentLearner<'a> {
    features: &'a Matrix,
    notes: Option<&'a Matrix>,
    teacher: Option<&'a [f64]>,
    labels: &'a [f64],
    weights: LossWeights,
    encoder: MlpParams,
    classifier: MlpParams,
    projection: MlpParams,
    note_projection: MlpParams,
    adam: [AdamState; 4],
}

fn gather(values: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| values[i]).collect()
}

impl StudentLearner<'_> {
    fn batch(&self, idx: &[usize], with_grads: bool) -> Result<(f64, Option<StudentGrads>)> {
        let xb = self.features.select_rows(idx);
        let (enc_cache, hidden) = self.encoder.forward(&xb)?;
        let (cls_cache, logits) = self.classifier.forward(&hidden)?;
        let labels = gather(self.labels, idx);
        let teacher = self.teacher.map(|t| gather(t, idx));

        let aligned = match self.notes {
            Some(notes) if self.weights.lambda_contrastive > 0.0 => {
                let (proj_cache, fx) = self.projection.forward(&hidden)?;
                let (note_cache, gy) = self.note_projection.forward(&notes.select_rows(idx))?;
                Some((proj_cache, note_cache, ContrastiveBatch::from_embeddings(&fx, &gy)?))
            }
            _ => None,
        };
        let out = combined_loss(
            CombinedInputs {
                student_logits: logits.data(),
                teacher_logits: teacher.as_deref(),
                labels: Some(&labels),
                contrastive: aligned.as_ref().map(|a| &a.2),
            },
            &self.weights,
        )?;
        if !with_grads {
            return Ok((out.loss, None));
        }

        let d_logits = Matrix::from_vec(idx.len(), 1, out.d_student_logits)?;
        let (classifier, mut d_hidden) =
            mlp_backward_with_input(&self.classifier, &cls_cache, &d_logits)?;
        let aligned_grads = match (aligned, out.d_x, out.d_y) {
            (Some((proj_cache, note_cache, _)), Some(d_x), Some(d_y)) => {
                let (proj, d_h) = mlp_backward_with_input(&self.projection, &proj_cache, &d_x)?;
                d_hidden.add_scaled(1.0, &d_h)?;
                let note = mlp_backward(&self.note_projection, &note_cache, &d_y)?;
                Some((proj, note))
            }
            _ => None,
        };
        let encoder = mlp_backward(&self.encoder, &enc_cache, &d_hidden)?;
        Ok((
            out.loss,
            Some(StudentGrads {
                encoder,
                classifier,
                aligned: aligned_grads,
            }),
        ))
    }
}

impl Learner for StudentLearner<'_> {
    fn step(&mut self, idx: &[usize]) -> Result<f64> {
        let (loss, grads) = self.batch(idx, true)?;
        let g = grads.expect("gradients requested");
        let [a_enc, a_cls, a_proj, a_note] = &mut self.adam;
        adam_step(&mut self.encoder, &g.encoder, a_enc)?;
        adam_step(&mut self.classifier, &g.classifier, a_cls)?;
        if let Some((proj, note)) = &g.aligned {
            adam_step(&mut self.projection, proj, a_proj)?;
            adam_step(&mut self.note_projection, note, a_note)?;
        }
        Ok(loss)
    }

    fn loss(&self, idx: &[usize]) -> Result<f64> {
        Ok(self.batch(idx, false)?.0)
    }
}

/// Trains one structured-deployment variant. `teacher_logits` is read only
/// when the variant has an active CKD term.
pub fn train_student(
    cohort: &Cohort,
    teacher_logits: &TeacherLogitTable,
    variant: VariantSpec,
    cfg: &TrainConfig,
) -> Result<StudentModel> {
    if !variant.is_student() {
        return Err(Error::invalid("train_student called with the teacher variant"));
    }
    cfg.validate()?;
    let weights = variant.loss_weights(&cfg.loss);
    weights
        .validate()
        .map_err(|e| Error::Config(format!("{} objective: {e}", variant.key())))?;
    let train = cohort.split(Split::Train);
    if train.is_empty() {
        return Err(Error::validation("cohort has no training records"));
    }
    let encoder_features = StructuredEncoder::fit(cohort)?;
    let features = encoder_features.encode_all(&train, &cohort.table)?;
    let labels = labels_of(&train);

    let teacher = if weights.lambda_ckd > 0.0 {
        Some(
            train
                .iter()
                .map(|r| {
                    teacher_logits.get(&r.patient_id).ok_or_else(|| {
                        Error::validation(format!(
                            "teacher logit table has no entry for training patient {:?}",
                            r.patient_id
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let notes = if weights.lambda_contrastive > 0.0 {
        Some(note_matrix(&train)?)
    } else {
        None
    };

    let root = SeededRng::new(cfg.seed);
    let hidden = *cfg.hidden_dims.last().expect("validated non-empty");
    let mut enc_dims = vec![features.cols()];
    enc_dims.extend(&cfg.hidden_dims);
    let encoder = MlpParams::init(
        MlpSpec::new(enc_dims, Activation::Relu).with_activated_output(),
        &mut root.derive(STREAM_ENCODER_INIT),
    )?;
    let classifier = MlpParams::init(
        MlpSpec::new(vec![hidden, 1], Activation::Relu),
        &mut root.derive(STREAM_CLASSIFIER_INIT),
    )?;
    let projection = MlpParams::init(
        MlpSpec::new(vec![hidden, cfg.projection_dim], Activation::Relu),
        &mut root.derive(STREAM_PROJECTION_INIT),
    )?;
    let note_width = notes.as_ref().map_or(1, Matrix::cols);
    let note_projection = MlpParams::init(
        MlpSpec::new(vec![note_width, cfg.projection_dim], Activation::Relu),
        &mut root.derive(STREAM_NOTE_PROJECTION_INIT),
    )?;
    let adam_cfg = cfg.adam();
    let mut learner = StudentLearner {
        features: &features,
        notes: notes.as_ref(),
        teacher: teacher.as_deref(),
        labels: &labels,
        adam: [
            AdamState::for_mlp(&encoder, adam_cfg),
            AdamState::for_mlp(&classifier, adam_cfg),
            AdamState::for_mlp(&projection, adam_cfg),
            AdamState::for_mlp(&note_projection, adam_cfg),
        ],
        weights,
        encoder,
        classifier,
        projection,
        note_projection,
    };
    let needs_pairs = learner.weights.needs_pairs();
    let meta = fit(&mut learner, train.len(), needs_pairs, cfg, &root)?;
    Ok(StudentModel {
        variant,
        features: encoder_features,
        encoder: learner.encoder,
        classifier: learner.classifier,
        projection: learner.projection,
        meta,
    })
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: VariantSpec,
    pub name: String,
    pub training_modalities: String,
    pub deployment_modalities: String,
    pub epochs_run: Option<usize>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

impl VariantResult {
    fn new(variant: VariantSpec, cfg: &TrainConfig) -> Self {
        Self {
            variant,
            name: variant.display_name().to_string(),
            training_modalities: variant.training_modalities(cfg.teacher_uses_structured).into(),
            deployment_modalities: variant.deployment_modalities(cfg.teacher_uses_structured).into(),
            epochs_run: None,
            report: None,
            error: None,
        }
    }

    pub fn auroc(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.auroc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub variants: Vec<VariantResult>,
}

impl AblationReport {
    pub fn get(&self, variant: VariantSpec) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.variant == variant)
    }

    pub fn all_failed(&self) -> bool {
        self.variants.iter().all(|v| v.report.is_none())
    }
}

/// Test-split evaluation of `model` with `resamples` bootstrap draws.
pub fn evaluate_model(model: &Model, cohort: &Cohort, resamples: usize, seed: u64) -> Result<EvalReport> {
    let test = cohort.split(Split::Test);
    let probs = model.predict_records(&test, &cohort.table)?;
    let set = ScoredSet::new(
        probs,
        test.iter().map(|r| r.label).collect(),
        test.iter().map(|r| r.patient_id.clone()).collect(),
    )?;
    evaluate(&set, resamples, seed)
}

/// Trains the teacher once (when any selected variant needs it), then each
/// selected student variant from the same seed, and evaluates all of them on
/// the test split. A failing variant is recorded and the others continue.
pub fn run_ablation(
    cohort: &Cohort,
    cfg: &TrainConfig,
    variants: &[VariantSpec],
    resamples: usize,
) -> Result<AblationReport> {
    cfg.validate()?;
    let needs_teacher = variants.iter().any(|&v| {
        v == VariantSpec::Teacher || (v.is_student() && v.loss_weights(&cfg.loss).lambda_ckd > 0.0)
    });
    let teacher = needs_teacher.then(|| train_teacher(cohort, cfg));
    let empty = TeacherLogitTable::default();

    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut row = VariantResult::new(variant, cfg);
        let outcome = (|| -> Result<(usize, EvalReport)> {
            let model = if variant == VariantSpec::Teacher {
                match &teacher {
                    Some(Ok((t, _))) => Model::Teacher(t.clone()),
                    Some(Err(e)) => return Err(Error::validation(format!("teacher training failed: {e}"))),
                    None => unreachable!("teacher requested"),
                }
            } else {
                let logits = match &teacher {
                    Some(Ok((_, table))) => table,
                    Some(Err(e)) if variant.loss_weights(&cfg.loss).lambda_ckd > 0.0 => {
                        return Err(Error::validation(format!("teacher training failed: {e}")))
                    }
                    _ => &empty,
                };
                Model::Student(train_student(cohort, logits, variant, cfg)?)
            };
            let epochs = match &model {
                Model::Teacher(t) => t.meta.epochs_run,
                Model::Student(s) => s.meta.epochs_run,
            };
            Ok((epochs, evaluate_model(&model, cohort, resamples, cfg.seed)?))
        })();
        match outcome {
            Ok((epochs, report)) => {
                row.epochs_run = Some(epochs);
                row.report = Some(report);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    Ok(AblationReport {
        seed: cfg.seed,
        variants: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_cohort, split_cohort, SynthConfig};

    fn cohort(seed: u64) -> Cohort {
        let mut s = generate_cohort(&SynthConfig {
            n_pairs: 60,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        split_cohort(&mut s.cohort, 0.8, seed).unwrap();
        s.cohort
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 16,
            hidden_dims: vec![16, 8],
            projection_dim: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in VariantSpec::ALL {
            assert_eq!(v.key().parse::<VariantSpec>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.key()));
        }
        assert_eq!("ehr".parse::<VariantSpec>().unwrap(), VariantSpec::EhrDataOnly);
        assert!(matches!("student".parse::<VariantSpec>(), Err(Error::Config(_))));
    }

    #[test]
    fn loss_templates_select_terms() {
        let base = LossWeights::default().with_lambdas(0.7, 0.3, 0.9);
        let lambdas = |v: VariantSpec| {
            let w = v.loss_weights(&base);
            (w.lambda_ckd, w.lambda_contrastive, w.lambda_bce)
        };
        assert_eq!(lambdas(VariantSpec::CckdStudent), (0.7, 0.3, 0.9));
        assert_eq!(lambdas(VariantSpec::ContrastiveOnly), (0.0, 0.3, 0.9));
        assert_eq!(lambdas(VariantSpec::CkdOnly), (0.7, 0.0, 0.0));
        assert_eq!(lambdas(VariantSpec::EhrDataOnly), (0.0, 0.0, 1.0));
        assert_eq!(lambdas(VariantSpec::Teacher), (0.0, 0.0, 1.0));
    }

    #[test]
    fn zero_learning_rate_keeps_initial_teacher() {
        let c = cohort(1);
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            ..quick()
        };
        let (model, table) = train_teacher(&c, &cfg).unwrap();
        let mut dims = vec![c.note_width().unwrap()];
        dims.extend(&cfg.hidden_dims);
        dims.push(1);
        let init = MlpParams::init(
            MlpSpec::new(dims, Activation::Relu),
            &mut SeededRng::new(cfg.seed).derive(STREAM_TEACHER_INIT),
        )
        .unwrap();
        assert_eq!(model.network, init);
        let train = c.split(Split::Train);
        let expected = init.predict(&model.inputs(&train, &c.table).unwrap()).unwrap();
        for (r, want) in train.iter().zip(expected.data()) {
            assert_eq!(table.get(&r.patient_id), Some(*want));
        }
        assert_eq!(table.len(), train.len());
    }

    #[test]
    fn teacher_logit_csv_round_trips_and_is_deterministic() {
        let c = cohort(2);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        train_teacher(&c, &quick()).unwrap().1.write_csv(&a).unwrap();
        let (_, table) = train_teacher(&c, &quick()).unwrap();
        table.write_csv(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(TeacherLogitTable::read_csv(&a).unwrap(), table);
    }

    #[test]
    fn students_require_their_inputs() {
        let c = cohort(3);
        let empty = TeacherLogitTable::default();
        let err = train_student(&c, &empty, VariantSpec::CkdOnly, &quick()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");

        let mut noteless = c.clone();
        noteless.records[0].note_emb = None;
        noteless.records[0].split = Split::Train;
        let err = train_student(&noteless, &empty, VariantSpec::ContrastiveOnly, &quick()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        assert!(train_student(&noteless, &empty, VariantSpec::EhrDataOnly, &quick()).is_ok());
        assert!(train_student(&c, &empty, VariantSpec::Teacher, &quick()).is_err());
    }

    #[test]
    fn ehr_only_ignores_teacher_logits() {
        let c = cohort(4);
        let (_, table) = train_teacher(&c, &quick()).unwrap();
        let mut scrambled = table.clone();
        for (i, (_, v)) in scrambled.iter_mut().enumerate() {
            *v = if i % 2 == 0 { 40.0 } else { -3.0 };
        }
        let cfg = quick();
        let a = train_student(&c, &table, VariantSpec::EhrDataOnly, &cfg).unwrap();
        let b = train_student(&c, &scrambled, VariantSpec::EhrDataOnly, &cfg).unwrap();
        let e = train_student(&c, &TeacherLogitTable::default(), VariantSpec::EhrDataOnly, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, e);
    }

    #[test]
    fn student_training_is_deterministic_and_finite() {
        let c = cohort(5);
        let (_, table) = train_teacher(&c, &quick()).unwrap();
        let before = table.clone();
        let a = train_student(&c, &table, VariantSpec::CckdStudent, &quick()).unwrap();
        let b = train_student(&c, &table, VariantSpec::CckdStudent, &quick()).unwrap();
        assert_eq!(a, b);
        assert_eq!(table, before);
        assert!(!a.meta.train_loss_history.is_empty());
        assert!(a.meta.train_loss_history.iter().all(|l| l.is_finite()));
        assert!(a.meta.best_validation_loss.is_some());
    }

    #[test]
    fn zero_classifier_predicts_one_half() {
        let c = cohort(6);
        let mut s = train_student(&c, &TeacherLogitTable::default(), VariantSpec::EhrDataOnly, &quick()).unwrap();
        s.classifier = MlpParams::zeros(s.classifier.spec.clone()).unwrap();
        let test = c.split(Split::Test);
        assert!(s.predict_records(&test, &c.table).unwrap().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn batch_prediction_matches_rows() {
        let c = cohort(7);
        let s = train_student(&c, &TeacherLogitTable::default(), VariantSpec::EhrDataOnly, &quick()).unwrap();
        let test = c.split(Split::Test);
        let batch = s.predict_records(&test, &c.table).unwrap();
        for (r, p) in test.iter().zip(&batch) {
            assert_eq!(s.predict_records(&[*r], &c.table).unwrap(), vec![*p]);
            assert!(*p > 0.0 && *p < 1.0);
        }
        let wrong = Matrix::zeros(2, s.input_width() + 1);
        assert!(matches!(s.predict(&wrong), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn students_deploy_without_notes_and_teacher_refuses() {
        let c = cohort(8);
        let (teacher, table) = train_teacher(&c, &quick()).unwrap();
        let student = train_student(&c, &table, VariantSpec::CckdStudent, &quick()).unwrap();
        let mut stripped = c.clone();
        stripped.records.iter_mut().for_each(|r| r.note_emb = None);
        let test = stripped.split(Split::Test);
        assert!(Model::Student(student).predict_records(&test, &stripped.table).is_ok());
        let err = Model::Teacher(teacher).predict_records(&test, &stripped.table).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("note embeddings"), "{err}");
    }

    #[test]
    fn model_files_round_trip() {
        let c = cohort(9);
        let (teacher, _) = train_teacher(&c, &quick()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.json");
        let model = Model::Teacher(teacher);
        model.save(&path).unwrap();
        assert_eq!(Model::load(&path).unwrap(), model);
    }

    #[test]
    fn structured_teacher_widens_its_input() {
        let c = cohort(10);
        let cfg = TrainConfig {
            teacher_uses_structured: true,
            ..quick()
        };
        let (t, _) = train_teacher(&c, &cfg).unwrap();
        assert_eq!(t.input_width(), 32 + c.demo_width() + c.table.width());
        assert_eq!(VariantSpec::Teacher.training_modalities(true), "Structured EHR + Notes");
    }

    #[test]
    fn tiny_training_sets_are_configuration_errors() {
        let mut c = cohort(11);
        // Keep a single training record.
        let mut kept = false;
        for r in &mut c.records {
            if r.split == Split::Train {
                if kept {
                    r.split = Split::Test;
                }
                kept = true;
            }
        }
        let cfg = TrainConfig {
            validation_fraction: 0.0,
            ..quick()
        };
        let err = train_student(&c, &TeacherLogitTable::default(), VariantSpec::ContrastiveOnly, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn ablation_reports_every_selected_variant() {
        let c = cohort(12);
        let r = run_ablation(&c, &quick(), &VariantSpec::ALL, 50).unwrap();
        assert_eq!(r.variants.len(), 5);
        assert!(r.variants.iter().all(|v| v.report.is_some()), "{r:?}");
        let r2 = run_ablation(&c, &quick(), &[VariantSpec::Teacher, VariantSpec::EhrDataOnly], 50).unwrap();
        assert_eq!(r2.variants.len(), 2);
        assert_eq!(r2.get(VariantSpec::EhrDataOnly), r.get(VariantSpec::EhrDataOnly));
    }

    #[test]
    fn failing_variants_are_recorded() {
        let mut c = cohort(13);
        for r in c.records.iter_mut().filter(|r| r.split == Split::Train).take(1) {
            r.note_emb = None;
        }
        let r = run_ablation(&c, &quick(), &VariantSpec::ALL, 20).unwrap();
        for v in &r.variants {
            let ok = v.variant == VariantSpec::EhrDataOnly;
            assert_eq!(v.report.is_some(), ok, "{v:?}");
            assert_eq!(v.error.is_some(), !ok);
        }
        assert!(!r.all_failed());
    }
}
