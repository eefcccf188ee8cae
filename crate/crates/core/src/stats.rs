//! Interquartile means, stratified percentile bootstrap and result tables.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmdp::{EpisodeLog, Rng64};
use crate::par;
use crate::seed::{rng_for, tag};

/// Mean of the middle half. Each value is treated as four equal slots and the
/// lowest and highest quarter of slots are dropped, so lengths that are not a
/// multiple of four trim the boundary values fractionally.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.len() < 4 {
        return Err(Error::input(format!("IQM needs at least 4 values, got {}", values.len())));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::input("IQM input contains NaN"));
    }
    let mut buf = values.to_vec();
    Ok(iqm_in_place(&mut buf))
}

/// IQM that reorders `buf`; runs in linear time.
pub(crate) fn iqm_in_place(buf: &mut [f64]) -> f64 {
    let n = buf.len();
    let lo = n / 4;
    let hi = (3 * n).div_ceil(4) - 1;
    let cmp = |a: &f64, b: &f64| a.total_cmp(b);
    buf.select_nth_unstable_by(lo, cmp);
    let upper = &mut buf[lo + 1..];
    upper.select_nth_unstable_by(hi - lo - 1, cmp);
    let slots = |i: usize| {
        let start = (4 * i).max(n);
        let end = (4 * i + 4).min(3 * n);
        end.saturating_sub(start) as f64
    };
    let inner: f64 = buf[lo + 1..hi].iter().sum();
    (slots(lo) * buf[lo] + slots(hi) * buf[hi] + 4.0 * inner) / (2 * n) as f64
}

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman and Fan type 7). `sorted` must be ascending.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let i = h.floor() as usize;
    let frac = h - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Returns `returns[replicate][episode]`; replicates share one trained
/// instantiation each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMatrix {
    pub returns: Vec<Vec<f64>>,
}

impl ReplicateMatrix {
    pub fn new(returns: Vec<Vec<f64>>) -> Result<Self> {
        let width = returns.first().map_or(0, Vec::len);
        if returns.is_empty() || width == 0 {
            return Err(Error::input("replicate matrix must be non-empty"));
        }
        if returns.iter().any(|r| r.len() != width) {
            return Err(Error::input("replicate matrix must be rectangular"));
        }
        Ok(ReplicateMatrix { returns })
    }

    pub fn replicates(&self) -> usize {
        self.returns.len()
    }

    pub fn episodes(&self) -> usize {
        self.returns[0].len()
    }

    pub fn pooled(&self) -> Vec<f64> {
        self.returns.concat()
    }

    pub fn iqm(&self) -> Result<f64> {
        iqm(&self.pooled())
    }

    /// One row per replicate, no header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for row in &self.returns {
            out.write_record(row.iter().map(|v| format!("{v:?}")))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rows = Vec::new();
        for rec in csv::ReaderBuilder::new().has_headers(false).from_reader(r).records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::input(format!("bad matrix value `{f}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        ReplicateMatrix::new(rows)
    }
}

/// For each replicate, `episodes` indices drawn with replacement from that
/// replicate only.
pub fn stratified_resample_indices(rng: &mut Rng64, replicates: usize, episodes: usize) -> Vec<Vec<usize>> {
    (0..replicates).map(|_| (0..episodes).map(|_| rng.gen_range(0..episodes)).collect()).collect()
}

/// IQM of every stratified resample, in resample order. Resample `b` uses the
/// stream derived from `(seed, b)`.
pub fn bootstrap_distribution(matrix: &ReplicateMatrix, resamples: usize, seed: u64, jobs: usize) -> Vec<f64> {
    let (r, m) = (matrix.replicates(), matrix.episodes());
    par::map_range(resamples, jobs, |b| {
        let mut rng = rng_for(seed, &[tag::BOOTSTRAP, b as u64]);
        let mut pool = Vec::with_capacity(r * m);
        for (rep, idx) in stratified_resample_indices(&mut rng, r, m).into_iter().enumerate() {
            pool.extend(idx.into_iter().map(|i| matrix.returns[rep][i]));
        }
        iqm_in_place(&mut pool)
    })
}

/// Central percentile interval of a bootstrap distribution.
pub fn percentile_interval(distribution: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = distribution.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (quantile_type7(&sorted, tail), quantile_type7(&sorted, 1.0 - tail))
}

/// Stratified percentile-bootstrap confidence interval for the pooled IQM.
pub fn bootstrap_ci(matrix: &ReplicateMatrix, resamples: usize, level: f64, seed: u64, jobs: usize) -> Result<(f64, f64)> {
    if matrix.replicates() < 2 {
        return Err(Error::input("bootstrap CI needs at least 2 replicates"));
    }
    if resamples == 0 {
        return Err(Error::input("bootstrap needs at least one resample"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::input("confidence level must lie in (0, 1)"));
    }
    if matrix.replicates() * matrix.episodes() < 4 {
        return Err(Error::input("too few values for an IQM"));
    }
    Ok(percentile_interval(&bootstrap_distribution(matrix, resamples, seed, jobs), level))
}

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// 100 · iqm / oracle iqm.
    pub pct_optimality: Option<f64>,
    /// Per-entry GPI usage fractions, `;`-separated.
    pub usage: Option<String>,
    /// Per-type team collection means, `;`-separated.
    pub objects_team: Option<String>,
    /// Per-type learner collection means, `;`-separated.
    pub objects_learner: Option<String>,
    /// Library entry used by a single-policy method.
    pub selected_entry: Option<usize>,
}

impl ResultRow {
    /// Point estimate plus bootstrap CI. The interval is widened, if
    /// necessary, to contain the point estimate.
    pub fn from_matrix(method: &str, matrix: &ReplicateMatrix, resamples: usize, level: f64, seed: u64, jobs: usize) -> Result<Self> {
        let point = matrix.iqm()?;
        let (low, high) = if matrix.replicates() >= 2 {
            bootstrap_ci(matrix, resamples, level, seed, jobs)?
        } else {
            (point, point)
        };
        Ok(ResultRow {
            method: method.to_string(),
            iqm: point,
            ci_low: low.min(point),
            ci_high: high.max(point),
            pct_optimality: None,
            usage: None,
            objects_team: None,
            objects_learner: None,
            selected_entry: None,
        })
    }

    pub fn overlaps(&self, other: &ResultRow) -> bool {
        self.ci_low <= other.ci_high && other.ci_low <= self.ci_high
    }
}

pub fn join_values(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(";")
}

/// Sets `pct_optimality` on every row when an `oracle` row is present.
pub fn fill_pct_optimality(rows: &mut [ResultRow]) {
    let Some(oracle) = rows.iter().find(|r| r.method == "oracle").map(|r| r.iqm) else {
        return;
    };
    for r in rows.iter_mut() {
        r.pct_optimality = (oracle != 0.0).then(|| 100.0 * r.iqm / oracle);
    }
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results_csv<R: Read>(r: R) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(r).deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Mean objects collected per type, for the team and for each agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectsCollected {
    pub team: Vec<f64>,
    pub per_agent: Vec<Vec<f64>>,
}

pub fn objects_collected_stats(logs: &[EpisodeLog]) -> Result<ObjectsCollected> {
    if let Some(bad) = logs.iter().find(|l| l.env_id != "foraging") {
        return Err(Error::input(format!("objects-collected statistics need foraging logs, got `{}`", bad.env_id)));
    }
    let Some(sample) = logs.iter().flat_map(|l| l.transitions.first()).next() else {
        return Ok(ObjectsCollected { team: Vec::new(), per_agent: Vec::new() });
    };
    let (dim, agents) = (sample.features.len(), sample.credit.len());
    let mut team = vec![0.0; dim];
    let mut per_agent = vec![vec![0.0; dim]; agents];
    for log in logs {
        for (k, v) in log.feature_totals().0.iter().enumerate() {
            team[k] += v;
        }
        for (a, row) in per_agent.iter_mut().enumerate() {
            for (k, v) in log.credit_totals(a).0.iter().enumerate() {
                row[k] += v;
            }
        }
    }
    let n = logs.len() as f64;
    team.iter_mut().for_each(|v| *v /= n);
    per_agent.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(ObjectsCollected { team, per_agent })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iqm_examples() {
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(iqm(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert_eq!(iqm(&[7.0; 9]).unwrap(), 7.0);
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(iqm(&v).unwrap(), 50.5);
        assert!(matches!(iqm(&[1.0, 2.0, 3.0]), Err(Error::Input(_))));
    }

    #[test]
    fn fractional_trim_at_five() {
        // 20 slots, 5 dropped at each end: 3/4 of the 2nd and 4th values survive
        let got = iqm(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let want = (3.0 * 2.0 + 4.0 * 3.0 + 3.0 * 4.0) / 10.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn type7_quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_type7(&s, 0.0), 1.0);
        assert_eq!(quantile_type7(&s, 1.0), 4.0);
        assert_eq!(quantile_type7(&s, 0.5), 2.5);
        assert!((quantile_type7(&s, 0.25) - 1.75).abs() < 1e-12);
    }

    #[test]
    fn constant_data_gives_zero_width() {
        let m = ReplicateMatrix::new(vec![vec![3.0; 20]; 3]).unwrap();
        let (lo, hi) = bootstrap_ci(&m, 200, 0.95, 1, 1).unwrap();
        assert_eq!((lo, hi), (3.0, 3.0));
    }

    #[test]
    fn matrix_validation_and_csv() {
        assert!(ReplicateMatrix::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        let m = ReplicateMatrix::new(vec![vec![0.1, 2.0], vec![1.0 / 3.0, -4.5]]).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(ReplicateMatrix::read_csv(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn pct_optimality_relative_to_oracle() {
        let row = |m: &str, v: f64| ResultRow {
            method: m.into(),
            iqm: v,
            ci_low: v,
            ci_high: v,
            pct_optimality: None,
            usage: None,
            objects_team: None,
            objects_learner: None,
            selected_entry: None,
        };
        let mut rows = vec![row("oracle", 8.0), row("gpat", 6.0)];
        fill_pct_optimality(&mut rows);
        assert_eq!(rows[0].pct_optimality, Some(100.0));
        assert_eq!(rows[1].pct_optimality, Some(75.0));
        let mut buf = Vec::new();
        write_results_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_results_csv(buf.as_slice()).unwrap(), rows);
    }
}
