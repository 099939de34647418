//! Synthetic matched case-control cohorts.
//!
//! Every patient has a label-free latent state `u ~ N(0, I_k)`. A single
//! latent direction `w` carries the label: the structured signal is
//! `s = u + beta_struct·label·w + noise_struct·ε`, and the note embedding is
//! `A_note·(u + beta_note·label·w) + noise_note·ε`, so the note view sees the
//! same clinical axis as the structured view, only far more cleanly.
//!
//! The structured signal reaches the records two ways: as a heavily noised
//! tail appended to the pair-shared matching covariates, and through the
//! choice of codes, drawn from `softmax(R·s)` over the vocabulary. Code vectors
//! are a noisy linear image of the same propensity matrix, `E = R·Mᵀ + noise`,
//! mimicking embeddings pre-trained on co-occurrence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{CodeEvent, CodeVectorTable, Cohort, PatientRecord, Split};
use crate::numerics::{dot, l2_normalize, softmax, Matrix, SeededRng};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const CODES_FILE: &str = "codes.jsonl";
pub const TRUTH_FILE: &str = "truth.json";

/// Generator settings. Defaults are calibrated so that a regularized logistic
/// regression reaches AUROC ≈ 0.96 on note embeddings and ≈ 0.72 on the
/// assembled structured features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub latent_dim: usize,
    pub d_note: usize,
    /// Total demographic width: matching block plus structured tail.
    pub d_demo: usize,
    /// Leading demographic columns shared by both members of a pair.
    pub d_match: usize,
    pub d_code: usize,
    pub n_codes_vocab: usize,
    pub beta_note: f64,
    pub beta_struct: f64,
    pub noise_note: f64,
    pub noise_struct: f64,
    /// Extra noise on the structured tail of the demographic block.
    pub tail_noise: f64,
    /// Noise added to the code vectors on top of their propensity image.
    pub code_noise: f64,
    /// Scale of the code-propensity matrix; larger values concentrate code choice.
    pub code_gain: f64,
    /// Mean number of codes per patient (at least one is always drawn).
    pub codes_mean: f64,
    pub max_age_days: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pairs: 1733,
            latent_dim: 8,
            d_note: 32,
            d_demo: 8,
            d_match: 4,
            d_code: 128,
            n_codes_vocab: 600,
            beta_note: 2.6,
            beta_struct: 2.6,
            noise_note: 0.3,
            noise_struct: 0.5,
            tail_noise: 6.0,
            code_noise: 3.5,
            code_gain: 1.0,
            codes_mean: 3.0,
            max_age_days: 1095,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("latent_dim", self.latent_dim),
            ("d_note", self.d_note),
            ("d_demo", self.d_demo),
            ("d_code", self.d_code),
            ("n_codes_vocab", self.n_codes_vocab),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be at least 1")));
            }
        }
        if self.n_pairs < 10 {
            return Err(Error::validation(format!(
                "n_pairs must be at least 10, got {}",
                self.n_pairs
            )));
        }
        if self.d_match > self.d_demo {
            return Err(Error::validation(format!(
                "d_match ({}) exceeds d_demo ({})",
                self.d_match, self.d_demo
            )));
        }
        let nonneg = [
            ("beta_note", self.beta_note),
            ("beta_struct", self.beta_struct),
            ("tail_noise", self.tail_noise),
            ("code_noise", self.code_noise),
            ("code_gain", self.code_gain),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        for (name, v) in [("noise_note", self.noise_note), ("noise_struct", self.noise_struct)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if !(self.codes_mean >= 1.0 && self.codes_mean.is_finite()) {
            return Err(Error::validation(format!(
                "codes_mean must be finite and ≥ 1, got {}",
                self.codes_mean
            )));
        }
        Ok(())
    }
}

/// Per-patient draws behind the observed record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientLatent {
    pub patient_id: String,
    pub u: Vec<f64>,
    pub structured_signal: Vec<f64>,
}

/// Generative parameters kept for oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    /// Unit latent direction carrying the label.
    pub label_direction: Vec<f64>,
    /// `d_note × k` loading of the latent state on the note embedding.
    pub note_loading: Matrix,
    /// `vocab × k` code-propensity matrix.
    pub code_propensity: Matrix,
    /// `d_code × k` map from propensity space into code-vector space.
    pub code_projection: Matrix,
    pub latents: Vec<PatientLatent>,
}

impl GroundTruth {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("ground truth serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub cohort: Cohort,
    pub truth: GroundTruth,
}

impl SynthCohort {
    /// Writes the records, code table and ground-truth sidecar into `dir`,
    /// creating it when missing.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.cohort
            .write(&dir.join(RECORDS_FILE), &dir.join(CODES_FILE))?;
        self.truth.write_json(&dir.join(TRUTH_FILE))
    }
}

fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches data")
}

fn gaussian_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

pub fn code_name(index: usize) -> String {
    format!("C{index:04}")
}

/// Draws a cohort with every record in the train split; see [`split_cohort`].
pub fn generate_cohort(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let k = cfg.latent_dim;
    let root = SeededRng::new(cfg.seed);
    let mut prng = root.derive(1);
    let inv_sqrt_k = 1.0 / (k as f64).sqrt();

    let label_direction = loop {
        // A zero draw is practically impossible; retry rather than fail.
        if let Ok(w) = l2_normalize(&gaussian_vec(&mut prng, k)) {
            break w;
        }
    };
    let note_loading = gaussian_matrix(&mut prng, cfg.d_note, k, inv_sqrt_k);
    let code_propensity = gaussian_matrix(&mut prng, cfg.n_codes_vocab, k, cfg.code_gain * inv_sqrt_k);
    let code_projection = gaussian_matrix(&mut prng, cfg.d_code, k, inv_sqrt_k);
    let mut code_vectors = code_propensity.matmul_transpose_b(&code_projection)?;
    for v in code_vectors.data_mut() {
        *v += cfg.code_noise * prng.normal();
    }
    let table = CodeVectorTable::new(
        (0..cfg.n_codes_vocab)
            .map(|c| (code_name(c), code_vectors.row(c).to_vec()))
            .collect::<BTreeMap<_, _>>(),
    )?;

    let mut rng = root.derive(2);
    let d_tail = cfg.d_demo - cfg.d_match;
    let mut records = Vec::with_capacity(2 * cfg.n_pairs);
    let mut latents = Vec::with_capacity(2 * cfg.n_pairs);
    for pair in 0..cfg.n_pairs {
        let matching = gaussian_vec(&mut rng, cfg.d_match);
        for (label, suffix) in [(1u8, 'a'), (0u8, 'b')] {
            let patient_id = format!("p{pair:05}{suffix}");
            let y = f64::from(label);
            let u = gaussian_vec(&mut rng, k);

            let shifted: Vec<f64> = u
                .iter()
                .zip(&label_direction)
                .map(|(ui, wi)| ui + cfg.beta_note * y * wi)
                .collect();
            let note: Vec<f64> = (0..cfg.d_note)
                .map(|r| dot(note_loading.row(r), &shifted) + cfg.noise_note * rng.normal())
                .collect();

            let signal: Vec<f64> = u
                .iter()
                .zip(&label_direction)
                .map(|(ui, wi)| ui + cfg.beta_struct * y * wi + cfg.noise_struct * rng.normal())
                .collect();

            let mut demo = matching.clone();
            demo.extend((0..d_tail).map(|j| signal[j % k] + cfg.tail_noise * rng.normal()));

            let n_codes = 1 + rng.poisson(cfg.codes_mean - 1.0) as usize;
            let propensity: Vec<f64> = (0..cfg.n_codes_vocab)
                .map(|c| dot(code_propensity.row(c), &signal))
                .collect();
            let weights = softmax(&propensity)?;
            let codes = rng
                .categorical(&weights, n_codes)
                .into_iter()
                .map(|c| CodeEvent {
                    code: code_name(c),
                    age_days: rng.below(cfg.max_age_days as usize + 1) as u64,
                })
                .collect();

            latents.push(PatientLatent {
                patient_id: patient_id.clone(),
                u,
                structured_signal: signal,
            });
            records.push(PatientRecord {
                patient_id,
                label,
                split: Split::Train,
                pair_id: Some(format!("pair{pair:05}")),
                demo,
                codes,
                note_emb: Some(note),
            });
        }
    }

    Ok(SynthCohort {
        cohort: Cohort::new(records, table)?,
        truth: GroundTruth {
            config: cfg.clone(),
            label_direction,
            note_loading,
            code_propensity,
            code_projection,
            latents,
        },
    })
}

/// Assigns splits at the matched-pair level: a seeded shuffle of the pairs,
/// the first `round(train_fraction · pairs)` go to train. Records without a
/// pair id form singleton groups.
pub fn split_cohort(cohort: &mut Cohort, train_fraction: f64, seed: u64) -> Result<()> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::validation(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in cohort.records.iter().enumerate() {
        let key = match &r.pair_id {
            Some(p) => format!("pair:{p}"),
            None => format!("patient:{}", r.patient_id),
        };
        groups.entry(key).or_default().push(i);
    }
    let n_groups = groups.len();
    let n_train = (train_fraction * n_groups as f64).round() as usize;
    if n_train < 2 || n_groups - n_train < 2 {
        return Err(Error::validation(format!(
            "{n_groups} pairs cannot give at least 2 pairs to each split at fraction {train_fraction}"
        )));
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let order = SeededRng::new(seed).permutation(n_groups);
    for (rank, g) in order.into_iter().enumerate() {
        let split = if rank < n_train { Split::Train } else { Split::Test };
        for &i in &groups[g] {
            cohort.records[i].split = split;
        }
    }
    Ok(())
}
