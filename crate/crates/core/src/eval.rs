//! Affine latent alignment, PSTH fit quality, tuning-curve baselines and
//! residual power spectra.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

pub use crate::data::TrialStructure;
use crate::error::{shape_err, Error, Result};
use crate::flows::RATE_FLOOR;
use crate::ndmath::DenseArray;
use crate::priors::{LabelColumn, LabelSpec};

/// Condition numbers above this raise a warning in [`AlignmentReport`].
pub const ALIGN_CONDITION_WARN: f64 = 1e8;

/// Least-squares affine map `est * a + c ~ truth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// `m_est x m_truth`.
    pub a: DenseArray,
    pub c: Vec<f64>,
    pub r2: Vec<f64>,
    pub mean_r2: f64,
    /// Mean squared residual over all entries after alignment.
    pub mse: f64,
    /// Condition number of the centered estimate.
    pub condition_number: f64,
    pub warning: Option<String>,
}

pub fn align_latents(est: &DenseArray, truth: &DenseArray) -> Result<AlignmentReport> {
    let (n, m) = (est.rows(), est.cols());
    if truth.rows() != n {
        return shape_err(format!("{n} estimated rows but {} true rows", truth.rows()));
    }
    if n <= m + 1 {
        return Err(Error::Argument(format!("alignment needs more than {} rows, got {n}", m + 1)));
    }
    if !est.all_finite() || !truth.all_finite() {
        return Err(Error::Value("alignment inputs must be finite".into()));
    }
    let k = truth.cols();
    let x = DMatrix::from_fn(n, m + 1, |i, j| if j < m { est.get(i, j) } else { 1.0 });
    let y = DMatrix::from_fn(n, k, |i, j| truth.get(i, j));
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let coef = svd
        .solve(&y, 1e-12 * smax.max(1.0))
        .map_err(|e| Error::Numeric(format!("least squares failed: {e}")))?;
    let resid = &y - &x * &coef;

    let mut r2 = Vec::with_capacity(k);
    for j in 0..k {
        let col = y.column(j);
        let mean = col.mean();
        let tot: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        let res: f64 = resid.column(j).iter().map(|v| v * v).sum();
        r2.push(if tot > 0.0 { 1.0 - res / tot } else if res == 0.0 { 1.0 } else { f64::NEG_INFINITY });
    }
    let mse = resid.iter().map(|v| v * v).sum::<f64>() / (n * k) as f64;

    let means: Vec<f64> = (0..m).map(|j| x.column(j).mean()).collect();
    let centered = DMatrix::from_fn(n, m, |i, j| x[(i, j)] - means[j]);
    let sv = centered.singular_values();
    let condition_number = if sv.min() > 0.0 { sv.max() / sv.min() } else { f64::INFINITY };
    let warning = (condition_number > ALIGN_CONDITION_WARN)
        .then(|| format!("estimate is nearly rank deficient (condition number {condition_number:.3e})"));

    let a = DenseArray::from_raw(vec![m, k], (0..m).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| coef[(i, j)]).collect());
    let c = (0..k).map(|j| coef[(m, j)]).collect();
    let mean_r2 = r2.iter().sum::<f64>() / k as f64;
    Ok(AlignmentReport { a, c, r2, mean_r2, mse, condition_number, warning })
}

/// Trial-averaged empirical and predicted firing per condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsthReport {
    pub conditions: Vec<usize>,
    /// One `T_c x n` table per condition.
    pub empirical: Vec<DenseArray>,
    pub predicted: Vec<DenseArray>,
    /// Per-neuron RMSE over all (condition, time bin) pairs.
    pub rmse: Vec<f64>,
}

pub fn psth_and_rmse(pred: &DenseArray, counts: &DenseArray, trials: &TrialStructure) -> Result<PsthReport> {
    if pred.shape() != counts.shape() {
        return shape_err(format!("predicted rates {:?} vs counts {:?}", pred.shape(), counts.shape()));
    }
    if trials.len() != counts.rows() {
        return shape_err(format!("{} trial rows for {} count rows", trials.len(), counts.rows()));
    }
    trials.validate()?;
    let n = counts.cols();
    let mut conditions: Vec<usize> = trials.condition.clone();
    conditions.sort_unstable();
    conditions.dedup();

    let all = trials.trials();
    let mut empirical = Vec::new();
    let mut predicted = Vec::new();
    let mut sq = vec![0.0; n];
    let mut cells = 0usize;
    for &cond in &conditions {
        let group: Vec<&Vec<usize>> = all.iter().filter(|(_, rows)| trials.condition[rows[0]] == cond).map(|(_, r)| r).collect();
        let len = group[0].len();
        if group.iter().any(|rows| rows.len() != len) {
            return Err(Error::Data(format!("condition {cond}: trials have unequal lengths; trim them first")));
        }
        let mut emp = DenseArray::zeros(&[len, n]);
        let mut prd = DenseArray::zeros(&[len, n]);
        for rows in &group {
            for (t, &r) in rows.iter().enumerate() {
                for j in 0..n {
                    emp.set(t, j, emp.get(t, j) + counts.get(r, j));
                    prd.set(t, j, prd.get(t, j) + pred.get(r, j));
                }
            }
        }
        let scale = 1.0 / group.len() as f64;
        let emp = emp.map(|v| v * scale);
        let prd = prd.map(|v| v * scale);
        for t in 0..len {
            for (j, acc) in sq.iter_mut().enumerate() {
                *acc += (emp.get(t, j) - prd.get(t, j)).powi(2);
            }
        }
        cells += len;
        empirical.push(emp);
        predicted.push(prd);
    }
    let rmse = sq.iter().map(|s| (s / cells as f64).sqrt()).collect();
    Ok(PsthReport { conditions, empirical, predicted, rmse })
}

pub const DEFAULT_BASELINE_BINS: usize = 20;

/// Label-to-rate lookup fitted by averaging counts per class or label bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TuningBaseline {
    Discrete { rates: DenseArray },
    Continuous { lo: f64, hi: f64, rates: DenseArray },
}

impl TuningBaseline {
    pub fn rates(&self) -> &DenseArray {
        match self {
            TuningBaseline::Discrete { rates } | TuningBaseline::Continuous { rates, .. } => rates,
        }
    }

    /// Label value represented by row `k` of the rate table.
    pub fn label_of(&self, k: usize) -> f64 {
        match self {
            TuningBaseline::Discrete { .. } => k as f64,
            TuningBaseline::Continuous { lo, hi, rates } => lo + (k as f64 + 0.5) * (hi - lo) / rates.rows() as f64,
        }
    }
}

/// Fits per-class (discrete) or per-bin (one continuous column) mean counts.
/// Empty classes or bins fall back to the global mean.
pub fn fit_tuning_baseline(counts: &DenseArray, labels: &DenseArray, spec: &LabelSpec, bins: Option<usize>) -> Result<TuningBaseline> {
    if labels.rows() != counts.rows() {
        return shape_err(format!("{} label rows for {} count rows", labels.rows(), counts.rows()));
    }
    if counts.rows() == 0 {
        return Err(Error::Data("baseline needs at least one row".into()));
    }
    let (groups, assign): (usize, Vec<usize>) = match spec.columns.as_slice() {
        [LabelColumn::Discrete { classes }] => {
            let idx = (0..labels.rows()).map(|i| labels.get(i, 0) as usize).collect();
            (*classes, idx)
        }
        [LabelColumn::Continuous] => {
            let b = bins.unwrap_or(DEFAULT_BASELINE_BINS);
            if b < 1 {
                return Err(Error::Config("baseline needs at least one bin".into()));
            }
            let (lo, hi) = label_range(labels);
            (b, (0..labels.rows()).map(|i| bin_of(labels.get(i, 0), lo, hi, b)).collect())
        }
        _ => return Err(Error::Unsupported("tuning baselines need a single label column".into())),
    };
    for i in 0..labels.rows() {
        spec.validate_row(labels.row_slice(i))?;
    }
    let n = counts.cols();
    let mut sums = DenseArray::zeros(&[groups, n]);
    let mut sizes = vec![0usize; groups];
    let mut global = vec![0.0; n];
    for (i, &k) in assign.iter().enumerate() {
        sizes[k] += 1;
        for j in 0..n {
            let v = counts.get(i, j);
            sums.set(k, j, sums.get(k, j) + v);
            global[j] += v;
        }
    }
    let total = counts.rows() as f64;
    for k in 0..groups {
        for j in 0..n {
            let v = if sizes[k] > 0 { sums.get(k, j) / sizes[k] as f64 } else { global[j] / total };
            sums.set(k, j, v);
        }
    }
    Ok(match spec.columns[0] {
        LabelColumn::Discrete { .. } => TuningBaseline::Discrete { rates: sums },
        LabelColumn::Continuous => {
            let (lo, hi) = label_range(labels);
            TuningBaseline::Continuous { lo, hi, rates: sums }
        }
    })
}

fn label_range(labels: &DenseArray) -> (f64, f64) {
    let col = (0..labels.rows()).map(|i| labels.get(i, 0));
    col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Label whose rate vector gives the highest Poisson likelihood for `x`; ties go to the lowest index.
pub fn baseline_decode(baseline: &TuningBaseline, x: &[f64]) -> Result<f64> {
    let rates = baseline.rates();
    if x.len() != rates.cols() {
        return shape_err(format!("{} counts for a {}-neuron baseline", x.len(), rates.cols()));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for k in 0..rates.rows() {
        let ll: f64 = x
            .iter()
            .zip(rates.row_slice(k))
            .map(|(&c, &r)| {
                let r = r.max(RATE_FLOOR);
                c * r.ln() - r
            })
            .sum();
        if ll > best.0 {
            best = (ll, k);
        }
    }
    Ok(baseline.label_of(best.1))
}

pub const MAX_PSD_SEGMENT: usize = 256;

/// One-sided Welch spectrum of `latent - prior` per latent dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdReport {
    pub sampling_rate: f64,
    pub segment_len: usize,
    pub segments: usize,
    /// Frequencies in Hz, `0 ..= fs / 2`.
    pub freqs: Vec<f64>,
    /// `F x m` power spectral density (units^2 / Hz).
    pub psd: DenseArray,
    /// Integral of the PSD per dimension.
    pub total_power: Vec<f64>,
    /// Mean square of the residual per dimension.
    pub mean_square: Vec<f64>,
}

impl PsdReport {
    /// Relative disagreement between integrated PSD and residual mean square, per dimension.
    pub fn parseval_error(&self) -> Vec<f64> {
        self.total_power
            .iter()
            .zip(&self.mean_square)
            .map(|(p, v)| if *v > 0.0 { (p - v).abs() / v } else { p.abs() })
            .collect()
    }

    /// Frequency of the largest PSD value in dimension `dim`, excluding DC.
    pub fn peak_frequency(&self, dim: usize) -> f64 {
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 1..self.freqs.len() {
            let v = self.psd.get(k, dim);
            if v > best.0 {
                best = (v, k);
            }
        }
        self.freqs[best.1]
    }
}

/// Welch estimate with a periodic Hann window, 50% overlap and no detrending.
pub fn residual_psd(latent: &DenseArray, prior: &DenseArray, sampling_rate: f64) -> Result<PsdReport> {
    if latent.shape() != prior.shape() {
        return shape_err(format!("latent {:?} vs prior {:?}", latent.shape(), prior.shape()));
    }
    if !(sampling_rate > 0.0) {
        return Err(Error::Argument(format!("sampling rate must be positive, got {sampling_rate}")));
    }
    let (t, m) = (latent.rows(), latent.cols());
    let seg = MAX_PSD_SEGMENT.min(t / 4);
    if seg < 2 || t < 2 * seg {
        return Err(Error::Argument(format!("{t} samples are too few for a Welch estimate")));
    }
    let hop = seg / 2;
    let segments = (t - seg) / hop + 1;
    let window: Vec<f64> = (0..seg).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / seg as f64).cos()).collect();
    let wpow: f64 = window.iter().map(|w| w * w).sum();
    let nfreq = seg / 2 + 1;
    let fft = FftPlanner::new().plan_fft_forward(seg);

    let mut psd = DenseArray::zeros(&[nfreq, m]);
    let mut mean_square = vec![0.0; m];
    let mut buf = vec![Complex::new(0.0, 0.0); seg];
    for d in 0..m {
        let resid: Vec<f64> = (0..t).map(|i| latent.get(i, d) - prior.get(i, d)).collect();
        mean_square[d] = resid.iter().map(|v| v * v).sum::<f64>() / t as f64;
        for s in 0..segments {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(resid[s * hop + i] * window[i], 0.0);
            }
            fft.process(&mut buf);
            for k in 0..nfreq {
                let one_sided = if k == 0 || (seg % 2 == 0 && k == seg / 2) { 1.0 } else { 2.0 };
                let p = one_sided * buf[k].norm_sqr() / (sampling_rate * wpow * segments as f64);
                psd.set(k, d, psd.get(k, d) + p);
            }
        }
    }
    let df = sampling_rate / seg as f64;
    let freqs = (0..nfreq).map(|k| k as f64 * df).collect();
    let total_power = (0..m).map(|d| (0..nfreq).map(|k| psd.get(k, d)).sum::<f64>() * df).collect();
    Ok(PsdReport { sampling_rate, segment_len: seg, segments, freqs, psd, total_power, mean_square })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::rng_stream;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rows: usize, cols: usize, seed: u64) -> DenseArray {
        let mut rng = rng_stream(seed, 0);
        DenseArray::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn align_identity() {
        let z = normal(50, 2, 1);
        let r = align_latents(&z, &z).unwrap();
        assert!(r.r2.iter().all(|v| (v - 1.0).abs() < 1e-12));
        for i in 0..2 {
            for j in 0..2 {
                assert!((r.a.get(i, j) - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
            assert!(r.c[i].abs() < 1e-10);
        }
        assert!(r.warning.is_none());
    }

    #[test]
    fn align_affine_invariance() {
        let truth = normal(80, 2, 2);
        let b = DenseArray::matrix(2, 2, vec![2.0, -1.0, 0.5, 3.0]).unwrap();
        let est = truth.matmul(&b).unwrap().map(|v| v + 4.0);
        let r = align_latents(&est, &truth).unwrap();
        assert!(r.r2.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn align_null_distribution() {
        let r = align_latents(&normal(1000, 2, 3), &normal(1000, 2, 4)).unwrap();
        assert!(r.mean_r2 < 0.05);
    }

    #[test]
    fn align_rank_deficiency_warns() {
        let truth = normal(30, 2, 5);
        let mut est = normal(30, 2, 6);
        for i in 0..30 {
            let v = est.get(i, 0);
            est.set(i, 1, 2.0 * v);
        }
        let r = align_latents(&est, &truth).unwrap();
        assert!(r.warning.is_some());
        assert!(matches!(align_latents(&normal(3, 2, 0), &normal(3, 2, 1)), Err(Error::Argument(_))));
    }

    fn trials(lens: &[(usize, usize)]) -> TrialStructure {
        let mut t = TrialStructure { trial: vec![], time: vec![], condition: vec![] };
        for (id, &(len, cond)) in lens.iter().enumerate() {
            for step in 0..len {
                t.trial.push(id);
                t.time.push(step);
                t.condition.push(cond);
            }
        }
        t
    }

    #[test]
    fn psth_exact_prediction_has_zero_rmse() {
        let tr = trials(&[(3, 0), (3, 0), (2, 1)]);
        let counts = DenseArray::matrix(8, 1, vec![1., 2., 3., 3., 2., 1., 5., 0.]).unwrap();
        let r0 = psth_and_rmse(&counts, &counts, &tr).unwrap();
        let pred = DenseArray::matrix(8, 1, vec![2., 2., 2., 2., 2., 2., 5., 0.]).unwrap();
        let r = psth_and_rmse(&pred, &counts, &tr).unwrap();
        assert_eq!(r.rmse, vec![0.0]);
        assert!(r0.rmse[0] == 0.0);
    }

    #[test]
    fn psth_constant_prediction_by_hand() {
        // one trial pair, PSTH (1, 2, 4); prediction 2 everywhere
        let tr = trials(&[(3, 0), (3, 0)]);
        let counts = DenseArray::matrix(6, 1, vec![0., 2., 4., 2., 2., 4.]).unwrap();
        let pred = DenseArray::filled(&[6, 1], 2.0);
        let r = psth_and_rmse(&pred, &counts, &tr).unwrap();
        let expect = ((1.0 + 0.0 + 4.0) / 3.0f64).sqrt();
        assert!((r.rmse[0] - expect).abs() < 1e-15);
        assert_eq!(r.empirical[0].data(), &[1.0, 2.0, 4.0]);
    }

    #[test]
    fn psth_unequal_lengths_rejected() {
        let tr = trials(&[(3, 0), (2, 0)]);
        let counts = DenseArray::zeros(&[5, 1]);
        assert!(matches!(psth_and_rmse(&counts, &counts, &tr), Err(Error::Data(_))));
    }

    #[test]
    fn psth_trial_order_invariant() {
        let tr = trials(&[(2, 0), (2, 1), (2, 0)]);
        let counts = DenseArray::matrix(6, 2, (0..12).map(|i| (i % 5) as f64).collect()).unwrap();
        let pred = counts.map(|v| v * 0.8 + 0.3);
        let a = psth_and_rmse(&pred, &counts, &tr).unwrap();
        let order = [4, 5, 2, 3, 0, 1];
        let tr2 = TrialStructure {
            trial: order.iter().map(|&i| tr.trial[i]).collect(),
            time: order.iter().map(|&i| tr.time[i]).collect(),
            condition: order.iter().map(|&i| tr.condition[i]).collect(),
        };
        let b = psth_and_rmse(&pred.select_rows(&order), &counts.select_rows(&order), &tr2).unwrap();
        for (x, y) in a.rmse.iter().zip(&b.rmse) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_single_class_is_global_mean() {
        let counts = DenseArray::matrix(3, 2, vec![1., 0., 3., 2., 5., 4.]).unwrap();
        let b = fit_tuning_baseline(&counts, &DenseArray::zeros(&[3, 1]), &LabelSpec::discrete(1), None).unwrap();
        assert_eq!(b.rates().data(), &[3.0, 2.0]);
    }

    #[test]
    fn baseline_disjoint_classes() {
        let counts = DenseArray::matrix(4, 4, vec![5., 6., 0., 0., 4., 5., 0., 1., 0., 0., 7., 5., 1., 0., 6., 6.]).unwrap();
        let labels = DenseArray::matrix(4, 1, vec![0., 0., 1., 1.]).unwrap();
        let b = fit_tuning_baseline(&counts, &labels, &LabelSpec::discrete(3), None).unwrap();
        for i in 0..4 {
            assert_eq!(baseline_decode(&b, counts.row_slice(i)).unwrap(), labels.get(i, 0));
        }
        // the empty class falls back to the global mean
        assert_eq!(b.rates().row_slice(2), &[2.5, 2.75, 3.25, 3.0]);
    }

    #[test]
    fn baseline_ties_go_low() {
        let rates = DenseArray::matrix(3, 1, vec![2.0, 2.0, 2.0]).unwrap();
        assert_eq!(baseline_decode(&TuningBaseline::Discrete { rates }, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn baseline_continuous_bins() {
        let labels = DenseArray::matrix(4, 1, vec![0.0, 0.1, 0.9, 1.0]).unwrap();
        let counts = DenseArray::matrix(4, 2, vec![6., 0., 5., 1., 0., 7., 1., 6.]).unwrap();
        let b = fit_tuning_baseline(&counts, &labels, &LabelSpec::continuous(1), Some(2)).unwrap();
        assert_eq!(baseline_decode(&b, &[6.0, 0.0]).unwrap(), 0.25);
        assert_eq!(baseline_decode(&b, &[0.0, 6.0]).unwrap(), 0.75);
    }

    #[test]
    fn psd_constant_series_sits_at_dc() {
        let z = DenseArray::filled(&[1024, 1], 3.0);
        let r = residual_psd(&z, &DenseArray::zeros(&[1024, 1]), 40.0).unwrap();
        let dc = r.psd.get(0, 0);
        assert!((1..r.freqs.len()).all(|k| r.psd.get(k, 0) < dc));
        // beyond the Hann main lobe (one bin) there is no power at all
        assert!((2..r.freqs.len()).all(|k| r.psd.get(k, 0) < 1e-20 * dc));
    }

    #[test]
    fn psd_sinusoid_peak() {
        let t = 2048;
        let z = DenseArray::matrix(t, 1, (0..t).map(|i| (2.0 * PI * 10.0 * i as f64 / 40.0).sin()).collect()).unwrap();
        let r = residual_psd(&z, &DenseArray::zeros(&[t, 1]), 40.0).unwrap();
        let df = r.freqs[1];
        assert!((r.peak_frequency(0) - 10.0).abs() <= df);
        assert!(r.parseval_error()[0] < 0.02, "{:?}", r.parseval_error());
    }

    #[test]
    fn psd_white_noise_is_flat() {
        let mut passes = 0;
        for seed in 0..20 {
            let z = normal(4096, 1, 100 + seed);
            let r = residual_psd(&z, &DenseArray::zeros(&[4096, 1]), 40.0).unwrap();
            let mut vals: Vec<f64> = (0..r.freqs.len()).map(|k| r.psd.get(k, 0)).collect();
            let max = vals.iter().cloned().fold(0.0, f64::max);
            vals.sort_by(f64::total_cmp);
            if max <= 3.0 * vals[vals.len() / 2] {
                passes += 1;
            }
        }
        assert!(passes >= 19, "{passes}/20");
    }

    #[test]
    fn psd_shape_errors() {
        assert!(matches!(residual_psd(&DenseArray::zeros(&[64, 2]), &DenseArray::zeros(&[64, 1]), 1.0), Err(Error::Shape(_))));
        assert!(residual_psd(&DenseArray::zeros(&[4, 1]), &DenseArray::zeros(&[4, 1]), 1.0).is_err());
    }
}
