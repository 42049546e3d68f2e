//! EDMD identification of a lifted linear surrogate `z⁺ = A z + B u`.
//!
//! Tracking errors are lifted through a dictionary of the six error
//! coordinates concatenated with Gaussian RBFs whose centers come from
//! seeded k-means. The surrogate is fit by Tikhonov-regularized least squares
//! jointly over `[A B]`, and a fixed projection `C = [I 0]` recovers the
//! error state from the lifted one.

use nalgebra::{DMatrix, DVector, Vector2, Vector6};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Number of raw error coordinates (the state block of the dictionary).
pub const N_STATE: usize = 6;
/// Number of action channels.
pub const N_ACTION: usize = 2;

/// Block length used when splitting a dataset into train/held-out parts.
/// Rows within a block stay contiguous so the held-out part still contains
/// runs long enough for multi-step rollout validation.
const SPLIT_BLOCK_LEN: usize = 50;

/// Maximum Lloyd iterations for k-means.
const KMEANS_MAX_ITER: usize = 50;

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// One identification triple `(e_k, u_k, e_{k+1})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdmdSample {
    pub e: Vector6<f64>,
    pub u: Vector2<f64>,
    pub e_next: Vector6<f64>,
}

/// A set of identification triples, in collection order.
#[derive(Debug, Clone, Default)]
pub struct EdmdDataset {
    pub samples: Vec<EdmdSample>,
}

impl EdmdDataset {
    pub fn from_transitions(transitions: &[crate::sim::Transition]) -> Self {
        let samples = transitions
            .iter()
            .map(|t| EdmdSample {
                e: t.error(),
                u: t.action,
                e_next: t.next_error(),
            })
            .collect();
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn check_finite(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            let finite = s.e.iter().all(|v| v.is_finite())
                && s.u.iter().all(|v| v.is_finite())
                && s.e_next.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Dataset(format!("non-finite entry in sample {i}")));
            }
        }
        Ok(())
    }

    /// Split into train/held-out parts by a seeded shuffle of contiguous
    /// blocks. Blocks (rather than rows) keep held-out rollout runs intact
    /// and avoid near-duplicate leakage between the parts.
    pub fn split(&self, holdout_frac: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&holdout_frac) {
            return Err(Error::InvalidArgument(format!(
                "holdout fraction must be in [0, 1), got {holdout_frac}"
            )));
        }
        let n = self.samples.len();
        if n == 0 {
            return Err(Error::Dataset("cannot split an empty dataset".into()));
        }
        let n_blocks = n.div_ceil(SPLIT_BLOCK_LEN);
        let mut order: Vec<usize> = (0..n_blocks).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let n_holdout_blocks = ((n_blocks as f64) * holdout_frac).round() as usize;

        let mut holdout_flags = vec![false; n_blocks];
        for &b in order.iter().take(n_holdout_blocks) {
            holdout_flags[b] = true;
        }
        let mut train = Vec::with_capacity(n);
        let mut holdout = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            if holdout_flags[i / SPLIT_BLOCK_LEN] {
                holdout.push(*s);
            } else {
                train.push(*s);
            }
        }
        Ok((Self { samples: train }, Self { samples: holdout }))
    }

    /// Persist as CSV with columns `e1..e6,u1,u2,ep1..ep6`. Floats are
    /// written in shortest round-trip form, so load/save is bit-faithful.
    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let mut header: Vec<String> = (1..=6).map(|i| format!("e{i}")).collect();
        header.extend((1..=2).map(|i| format!("u{i}")));
        header.extend((1..=6).map(|i| format!("ep{i}")));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = Vec::with_capacity(14);
            row.extend(s.e.iter().map(|v| format!("{v:?}")));
            row.extend(s.u.iter().map(|v| format!("{v:?}")));
            row.extend(s.e_next.iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = csv::Reader::from_reader(BufReader::new(file));
        let mut samples = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record?;
            if record.len() != 14 {
                return Err(Error::Dataset(format!(
                    "row {line}: expected 14 columns, got {}",
                    record.len()
                )));
            }
            let parse = |i: usize| -> Result<f64> {
                record[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Dataset(format!("row {line}, column {i}: {e}")))
            };
            let mut vals = [0.0; 14];
            for (i, v) in vals.iter_mut().enumerate() {
                *v = parse(i)?;
            }
            samples.push(EdmdSample {
                e: Vector6::from_row_slice(&vals[0..6]),
                u: Vector2::new(vals[6], vals[7]),
                e_next: Vector6::from_row_slice(&vals[8..14]),
            });
        }
        let ds = Self { samples };
        ds.check_finite()?;
        Ok(ds)
    }
}

// ---------------------------------------------------------------------------
// Dictionary
// ---------------------------------------------------------------------------

/// How the RBF bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthMode {
    /// Median pairwise distance between the k-means centers (median
    /// heuristic); falls back to the median center–data distance when only
    /// one center exists.
    Median,
    /// Explicit bandwidth.
    Fixed(f64),
}

/// Lifting dictionary: the six error coordinates concatenated with Gaussian
/// RBFs `exp(−‖e − c_i‖² / (2γ²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub centers: Vec<Vector6<f64>>,
    pub bandwidth: f64,
}

impl Dictionary {
    /// The identity lift: no RBF features.
    pub fn identity() -> Self {
        Self {
            centers: Vec::new(),
            bandwidth: 1.0,
        }
    }

    pub fn n_lift(&self) -> usize {
        N_STATE + self.centers.len()
    }

    /// Lift an error vector: `[e; rbf_1(e); …; rbf_k(e)]`.
    pub fn lift(&self, e: &Vector6<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.n_lift());
        z.rows_mut(0, N_STATE).copy_from(e);
        let denom = 2.0 * self.bandwidth * self.bandwidth;
        for (i, c) in self.centers.iter().enumerate() {
            let d2 = (e - c).norm_squared();
            z[N_STATE + i] = (-d2 / denom).exp();
        }
        z
    }

    /// FNV-1a fingerprint over the dictionary contents; used to tie
    /// downstream artifacts (certificates, checkpoints) to the dictionary
    /// they were computed from.
    pub fn fingerprint(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        eat(&(self.centers.len() as u64).to_le_bytes());
        for c in &self.centers {
            for v in c.iter() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        eat(&self.bandwidth.to_bits().to_le_bytes());
        h
    }
}

/// Squared Euclidean distance between 6-vectors.
fn dist2(a: &Vector6<f64>, b: &Vector6<f64>) -> f64 {
    (a - b).norm_squared()
}

/// Seeded k-means++ initialization followed by Lloyd iterations.
/// Assignment ties break toward the lowest center index.
fn kmeans(data: &[Vector6<f64>], k: usize, seed: u64) -> Vec<Vector6<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.len();
    debug_assert!(k >= 1 && k <= n);

    // k-means++ seeding.
    let mut centers: Vec<Vector6<f64>> = Vec::with_capacity(k);
    centers.push(data[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = data.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                t -= w;
                if t <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(data[next]);
        for (i, p) in data.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, centers.last().unwrap()));
        }
    }

    // Lloyd refinement.
    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITER {
        for (i, p) in data.iter().enumerate() {
            let mut best = 0;
            let mut best_d = dist2(p, &centers[0]);
            for (j, c) in centers.iter().enumerate().skip(1) {
                let d = dist2(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assign[i] = best;
        }
        let mut sums = vec![Vector6::<f64>::zeros(); k];
        let mut counts = vec![0usize; k];
        for (i, p) in data.iter().enumerate() {
            sums[assign[i]] += p;
            counts[assign[i]] += 1;
        }
        let mut max_shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] > 0 {
                let mean = sums[j] / counts[j] as f64;
                max_shift = max_shift.max((mean - centers[j]).norm());
                centers[j] = mean;
            }
            // Empty clusters keep their previous center.
        }
        if max_shift < 1e-12 {
            break;
        }
    }
    centers
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Build the lifting dictionary from identification data: k-means centers on
/// the error vectors plus a bandwidth per `BandwidthMode`.
pub fn build_dictionary(
    dataset: &EdmdDataset,
    n_rbf: usize,
    bandwidth: BandwidthMode,
    seed: u64,
) -> Result<Dictionary> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot build a dictionary from an empty dataset".into()));
    }
    dataset.check_finite()?;
    if n_rbf > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "n_rbf = {} exceeds dataset size {}",
            n_rbf,
            dataset.len()
        )));
    }
    if n_rbf == 0 {
        return Ok(Dictionary::identity());
    }

    let points: Vec<Vector6<f64>> = dataset.samples.iter().map(|s| s.e).collect();
    let centers = kmeans(&points, n_rbf, seed);

    let bw = match bandwidth {
        BandwidthMode::Fixed(v) => {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "fixed bandwidth must be positive, got {v}"
                )));
            }
            v
        }
        BandwidthMode::Median => {
            let mut dists = Vec::new();
            if centers.len() >= 2 {
                for i in 0..centers.len() {
                    for j in (i + 1)..centers.len() {
                        dists.push(dist2(&centers[i], &centers[j]).sqrt());
                    }
                }
            } else {
                dists.extend(points.iter().map(|p| dist2(p, &centers[0]).sqrt()));
            }
            let m = median(&mut dists);
            if m <= 1e-12 {
                return Err(Error::InvalidArgument(
                    "median-heuristic bandwidth degenerated to zero; \
                     supply a fixed bandwidth instead"
                        .into(),
                ));
            }
            m
        }
    };

    Ok(Dictionary {
        centers,
        bandwidth: bw,
    })
}

// ---------------------------------------------------------------------------
// Model fit
// ---------------------------------------------------------------------------

/// Summary of a completed fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    /// Frobenius norm of the one-step residual `‖Z′ − AZ − BU‖_F`.
    pub residual_frobenius: f64,
    pub n_samples: usize,
    pub tikhonov: f64,
}

/// The lifted linear surrogate and the dictionary that produced it.
#[derive(Debug, Clone)]
pub struct LiftedModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Projection recovering the error state: `C z = e` for `z = lift(e)`.
    pub c: DMatrix<f64>,
    pub dictionary: Dictionary,
    pub fit_report: FitReport,
}

impl LiftedModel {
    pub fn n_lift(&self) -> usize {
        self.dictionary.n_lift()
    }

    pub fn lift(&self, e: &Vector6<f64>) -> DVector<f64> {
        self.dictionary.lift(e)
    }
}

/// Fit `z⁺ ≈ A z + B u` by regularized least squares jointly over `Θ = [A B]`:
/// `min_Θ ‖Z′ − Θ G‖²_F + λ‖Θ‖²_F` with `G = [Z; U]`, solved through the
/// normal equations `Θ (G Gᵀ + λI) = Z′ Gᵀ` via Cholesky.
pub fn fit_edmd(dataset: &EdmdDataset, dict: &Dictionary, tikhonov: f64) -> Result<LiftedModel> {
    let n = dict.n_lift();
    let m_samples = dataset.len();
    if m_samples < n + N_ACTION {
        return Err(Error::Dataset(format!(
            "need at least {} samples to fit a {}-dimensional lifted model, got {}",
            n + N_ACTION,
            n,
            m_samples
        )));
    }
    if tikhonov < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "tikhonov must be non-negative, got {tikhonov}"
        )));
    }
    dataset.check_finite()?;

    // Column k of Z / Z′ is the lift of e_k / e_{k+1}; G stacks Z over U.
    let mut g = DMatrix::zeros(n + N_ACTION, m_samples);
    let mut z_next = DMatrix::zeros(n, m_samples);
    for (k, s) in dataset.samples.iter().enumerate() {
        g.view_mut((0, k), (n, 1)).copy_from(&dict.lift(&s.e));
        g.view_mut((n, k), (N_ACTION, 1)).copy_from(&s.u);
        z_next.view_mut((0, k), (n, 1)).copy_from(&dict.lift(&s.e_next));
    }

    let mut gram = &g * g.transpose();
    for i in 0..gram.nrows() {
        gram[(i, i)] += tikhonov;
    }
    let rhs = &g * z_next.transpose(); // (n+m) × n
    let chol = gram.cholesky().ok_or(Error::RankDeficient)?;
    let theta_t = chol.solve(&rhs); // (n+m) × n
    let theta = theta_t.transpose(); // n × (n+m)

    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient);
    }

    let a = theta.view((0, 0), (n, n)).into_owned();
    let b = theta.view((0, n), (n, N_ACTION)).into_owned();
    let residual_frobenius = (&z_next - &theta * &g).norm();

    let mut c = DMatrix::zeros(N_STATE, n);
    for i in 0..N_STATE {
        c[(i, i)] = 1.0;
    }

    Ok(LiftedModel {
        a,
        b,
        c,
        dictionary: dict.clone(),
        fit_report: FitReport {
            residual_frobenius,
            n_samples: m_samples,
            tikhonov,
        },
    })
}

/// One step of the surrogate: exactly `A z + B u`.
pub fn predict_one_step(
    model: &LiftedModel,
    z: &DVector<f64>,
    u: &Vector2<f64>,
) -> Result<DVector<f64>> {
    if z.len() != model.n_lift() {
        return Err(Error::DimensionMismatch {
            context: "predict_one_step".into(),
            expected: format!("lifted vector of length {}", model.n_lift()),
            actual: format!("length {}", z.len()),
        });
    }
    Ok(&model.a * z + &model.b * DVector::from_column_slice(u.as_slice()))
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// One-step and multi-step prediction quality on held-out data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    /// RMSE of `C (A g(e) + B u)` against `e⁺`, per error channel.
    pub one_step_rmse: Vec<f64>,
    /// Pooled RMSE over multi-step open-loop rollouts on contiguous runs,
    /// across all channels and steps; absent when the dataset has no run of
    /// length ≥ 2.
    pub multi_step_rmse: Option<f64>,
    pub rollout_horizon: usize,
    pub n_rollout_steps: usize,
}

/// Evaluate a fitted model on held-out data.
///
/// Multi-step rollouts use the contiguous runs of the dataset (rows where
/// one sample's `e_next` is bitwise the next sample's `e`), re-lifting
/// nothing: the lifted state is propagated open-loop with recorded actions
/// for up to `horizon` steps per run.
pub fn validate_model(
    model: &LiftedModel,
    heldout: &EdmdDataset,
    horizon: usize,
) -> Result<ValidationReport> {
    if heldout.is_empty() {
        return Err(Error::Dataset("validation requires a non-empty held-out set".into()));
    }
    heldout.check_finite()?;

    // One-step, per channel.
    let mut sq = [0.0f64; N_STATE];
    for s in &heldout.samples {
        let pred = &model.c * predict_one_step(model, &model.lift(&s.e), &s.u)?;
        for i in 0..N_STATE {
            let d = pred[i] - s.e_next[i];
            sq[i] += d * d;
        }
    }
    let n = heldout.len() as f64;
    let one_step_rmse: Vec<f64> = sq.iter().map(|v| (v / n).sqrt()).collect();

    // Multi-step over contiguous runs.
    let mut pooled_sq = 0.0f64;
    let mut pooled_n = 0usize;
    let samples = &heldout.samples;
    let mut start = 0;
    while start < samples.len() {
        let mut end = start;
        while end + 1 < samples.len() && samples[end].e_next == samples[end + 1].e {
            end += 1;
        }
        // Run of transitions [start, end]; roll the surrogate forward.
        let mut z = model.lift(&samples[start].e);
        for (step, s) in samples[start..=end].iter().enumerate() {
            if step >= horizon {
                break;
            }
            z = predict_one_step(model, &z, &s.u)?;
            let pred = &model.c * &z;
            for i in 0..N_STATE {
                let d = pred[i] - s.e_next[i];
                pooled_sq += d * d;
            }
            pooled_n += N_STATE;
        }
        start = end + 1;
    }
    let multi_step_rmse = if pooled_n > 0 {
        Some((pooled_sq / pooled_n as f64).sqrt())
    } else {
        None
    };

    Ok(ValidationReport {
        one_step_rmse,
        multi_step_rmse,
        rollout_horizon: horizon,
        n_rollout_steps: pooled_n / N_STATE,
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub(crate) struct MatrixJson {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

impl MatrixJson {
    pub(crate) fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub(crate) fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::ArtifactMismatch(format!(
                "matrix payload has {} entries for a {}×{} shape",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    a: MatrixJson,
    b: MatrixJson,
    c: MatrixJson,
    centers: Vec<[f64; 6]>,
    bandwidth: f64,
    dictionary_fingerprint: u64,
    fit_report: FitReport,
}

impl LiftedModel {
    pub fn save_json<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let json = ModelJson {
            a: MatrixJson::from_matrix(&self.a),
            b: MatrixJson::from_matrix(&self.b),
            c: MatrixJson::from_matrix(&self.c),
            centers: self
                .dictionary
                .centers
                .iter()
                .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
                .collect(),
            bandwidth: self.dictionary.bandwidth,
            dictionary_fingerprint: self.dictionary.fingerprint(),
            fit_report: self.fit_report.clone(),
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), &json)?;
        Ok(())
    }

    pub fn load_json<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let json: ModelJson = serde_json::from_reader(BufReader::new(file))?;
        let dictionary = Dictionary {
            centers: json
                .centers
                .iter()
                .map(|c| Vector6::from_row_slice(c))
                .collect(),
            bandwidth: json.bandwidth,
        };
        if dictionary.fingerprint() != json.dictionary_fingerprint {
            return Err(Error::ArtifactMismatch(
                "model file fingerprint does not match its dictionary payload".into(),
            ));
        }
        let model = Self {
            a: json.a.to_matrix()?,
            b: json.b.to_matrix()?,
            c: json.c.to_matrix()?,
            dictionary,
            fit_report: json.fit_report,
        };
        let n = model.n_lift();
        if model.a.shape() != (n, n)
            || model.b.shape() != (n, N_ACTION)
            || model.c.shape() != (N_STATE, n)
        {
            return Err(Error::ArtifactMismatch(format!(
                "inconsistent matrix shapes for lifted dimension {n}"
            )));
        }
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
