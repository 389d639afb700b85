//! Metrics files.
//!
//! `metrics.csv` columns:
//!
//! | column    | meaning                                                     |
//! |-----------|-------------------------------------------------------------|
//! | seed      | master seed of the run                                      |
//! | mode      | model mode                                                  |
//! | phase     | `train`, `weak`, `strong` or `toy`                          |
//! | task      | task id                                                     |
//! | episode   | episode index within (phase, task)                          |
//! | return    | undiscounted episode return                                 |
//! | steps     | environment steps taken                                     |
//! | posterior | `factor:m0 m1/s0 s1` per factor, `;` separated, at episode end |
//!
//! Wall-clock seconds go to `timings.csv` so that metrics stay
//! byte-identical across reruns. `summary.csv` holds, per
//! (mode, phase, episode), the mean over seeds of the per-seed average
//! return with a percentile bootstrap 95% interval.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::latent::TaskPosterior;

pub const METRICS_HEADER: &str = "seed,mode,phase,task,episode,return,steps,posterior";
pub const SUMMARY_HEADER: &str = "mode,phase,episode,n_seeds,mean,ci_low,ci_high";
pub const TRACE_HEADER: &str = "task,episode,step,factor,coordinate,mean,std";
pub const TIMING_HEADER: &str = "seed,mode,phase,task,episode,seconds";
pub const DISTANCE_HEADER: &str = "task,episode,step,distance";

/// Fixed seed of the bootstrap resampler so summaries are reproducible.
const BOOTSTRAP_SEED: u64 = 0x5eed_b007;

/// Posterior mean and std of one factor.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSnapshot {
    pub factor: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn snapshot(post: &TaskPosterior<f64>) -> Vec<FactorSnapshot> {
    post.layout()
        .factors()
        .iter()
        .map(|f| FactorSnapshot {
            factor: f.name.clone(),
            mean: post.mean(&f.name).expect("factor of own layout").to_vec(),
            std: post.std(&f.name).expect("factor of own layout"),
        })
        .collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn encode_posterior(p: &[FactorSnapshot]) -> String {
    p.iter().map(|f| format!("{}:{}/{}", f.factor, join(&f.mean), join(&f.std))).collect::<Vec<_>>().join(";")
}

fn decode_posterior(s: &str) -> Result<Vec<FactorSnapshot>> {
    let bad = || Error::Format(format!("bad posterior field `{s}`"));
    let nums = |x: &str| -> Result<Vec<f64>> { x.split_whitespace().map(|v| v.parse().map_err(|_| bad())).collect() };
    s.split(';')
        .filter(|f| !f.is_empty())
        .map(|f| {
            let (name, rest) = f.split_once(':').ok_or_else(bad)?;
            let (m, sd) = rest.split_once('/').ok_or_else(bad)?;
            Ok(FactorSnapshot { factor: name.to_string(), mean: nums(m)?, std: nums(sd)? })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub mode: String,
    pub phase: String,
    pub task: usize,
    pub episode: usize,
    pub ret: f64,
    pub steps: usize,
    pub posterior: Vec<FactorSnapshot>,
}

impl MetricsRow {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.seed,
            self.mode,
            self.phase,
            self.task,
            self.episode,
            self.ret,
            self.steps,
            encode_posterior(&self.posterior)
        )
    }

    fn from_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.splitn(8, ',').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!("metrics line has {} fields: `{line}`", f.len())));
        }
        let num = |i: usize| -> Result<u64> { f[i].parse().map_err(|_| Error::Format(format!("bad integer `{}`", f[i]))) };
        Ok(Self {
            seed: num(0)?,
            mode: f[1].to_string(),
            phase: f[2].to_string(),
            task: num(3)? as usize,
            episode: num(4)? as usize,
            ret: f[5].parse().map_err(|_| Error::Format(format!("bad return `{}`", f[5])))?,
            steps: num(6)? as usize,
            posterior: decode_posterior(f[7])?,
        })
    }
}

/// Opens `path` for appending, writing `header` if the file is new or
/// empty and checking it otherwise.
fn open_append(path: &Path, header: &str) -> Result<File> {
    if path.exists() && std::fs::metadata(path)?.len() > 0 {
        let mut first = String::new();
        BufReader::new(File::open(path)?).read_line(&mut first)?;
        if first.trim_end() != header {
            return Err(Error::Format(format!("{} has header `{}`, expected `{header}`", path.display(), first.trim_end())));
        }
        Ok(OpenOptions::new().append(true).open(path)?)
    } else {
        let mut f = File::create(path)?;
        writeln!(f, "{header}")?;
        Ok(f)
    }
}

fn append_lines(path: &Path, header: &str, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut f = open_append(path, header)?;
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Appends rows to a metrics file, creating it with the header if needed.
pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Empty("metrics rows".into()));
    }
    append_lines(path, METRICS_HEADER, rows.iter().map(MetricsRow::to_line))
}

fn data_lines(path: &Path, header: &str) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => Ok(lines.filter(|l| !l.is_empty()).map(str::to_string).collect()),
        Some(h) => Err(Error::Format(format!("{} has header `{h}`, expected `{header}`", path.display()))),
        None => Err(Error::Format(format!("{} is empty", path.display()))),
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    data_lines(path, METRICS_HEADER)?.iter().map(|l| MetricsRow::from_line(l)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub seed: u64,
    pub mode: String,
    pub phase: String,
    pub task: usize,
    pub episode: usize,
    pub seconds: f64,
}

pub fn write_timings(rows: &[TimingRow], path: &Path) -> Result<()> {
    append_lines(
        path,
        TIMING_HEADER,
        rows.iter().map(|r| format!("{},{},{},{},{},{:.3}", r.seed, r.mode, r.phase, r.task, r.episode, r.seconds)),
    )
}

/// One coordinate of one factor's posterior at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub task: usize,
    pub episode: usize,
    pub step: usize,
    pub factor: String,
    pub coordinate: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn trace_rows(task: usize, episode: usize, step: usize, snap: &[FactorSnapshot]) -> Vec<TraceRow> {
    snap.iter()
        .flat_map(|f| {
            (0..f.mean.len()).map(move |c| TraceRow {
                task,
                episode,
                step,
                factor: f.factor.clone(),
                coordinate: c,
                mean: f.mean[c],
                std: f.std[c],
            })
        })
        .collect()
}

pub fn write_traces(rows: &[TraceRow], path: &Path) -> Result<()> {
    append_lines(
        path,
        TRACE_HEADER,
        rows.iter().map(|r| format!("{},{},{},{},{},{},{}", r.task, r.episode, r.step, r.factor, r.coordinate, r.mean, r.std)),
    )
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceRow>> {
    data_lines(path, TRACE_HEADER)?
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad trace line `{l}`"));
            if f.len() != 7 {
                return Err(bad());
            }
            Ok(TraceRow {
                task: f[0].parse().map_err(|_| bad())?,
                episode: f[1].parse().map_err(|_| bad())?,
                step: f[2].parse().map_err(|_| bad())?,
                factor: f[3].to_string(),
                coordinate: f[4].parse().map_err(|_| bad())?,
                mean: f[5].parse().map_err(|_| bad())?,
                std: f[6].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Distance of the pole tip to the goal at one step of the toy demo.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceRow {
    pub task: usize,
    pub episode: usize,
    pub step: usize,
    pub distance: f64,
}

pub fn write_distances(rows: &[DistanceRow], path: &Path) -> Result<()> {
    append_lines(path, DISTANCE_HEADER, rows.iter().map(|r| format!("{},{},{},{}", r.task, r.episode, r.step, r.distance)))
}

/// Mean and percentile-bootstrap `level` interval of the mean.
pub fn bootstrap_ci<R: Rng + ?Sized>(values: &[f64], resamples: usize, level: f64, rng: &mut R) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("bootstrap sample".into()));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid("bootstrap needs resamples > 0 and a level in (0, 1)".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let q = |p: f64| means[((p * resamples as f64).floor() as usize).min(resamples - 1)];
    // Guard against rounding pushing a constant sample's interval off its mean.
    Ok((mean, q(tail).min(mean), q(1.0 - tail).max(mean)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub mode: String,
    pub phase: String,
    pub episode: usize,
    pub n_seeds: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Per (mode, phase, episode): each seed's return averaged over tasks,
/// then mean and 95% bootstrap interval over seeds.
pub fn summarize(rows: &[MetricsRow], resamples: usize) -> Result<Vec<SummaryRow>> {
    use std::collections::BTreeMap;
    let mut per_seed: BTreeMap<(String, String, usize), BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        let e = per_seed.entry((r.mode.clone(), r.phase.clone(), r.episode)).or_default().entry(r.seed).or_insert((0.0, 0));
        e.0 += r.ret;
        e.1 += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    per_seed
        .into_iter()
        .map(|((mode, phase, episode), seeds)| {
            let vals: Vec<f64> = seeds.values().map(|&(s, n)| s / n as f64).collect();
            let (mean, lo, hi) = bootstrap_ci(&vals, resamples, 0.95, &mut rng)?;
            Ok(SummaryRow { mode, phase, episode, n_seeds: vals.len(), mean, ci_low: lo, ci_high: hi })
        })
        .collect()
}

/// Overwrites `path` with the summary table.
pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{},{}\n", r.mode, r.phase, r.episode, r.n_seeds, r.mean, r.ci_low, r.ci_high));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    data_lines(path, SUMMARY_HEADER)?
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad summary line `{l}`"));
            if f.len() != 7 {
                return Err(bad());
            }
            let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(SummaryRow {
                mode: f[0].to_string(),
                phase: f[1].to_string(),
                episode: f[2].parse().map_err(|_| bad())?,
                n_seeds: f[3].parse().map_err(|_| bad())?,
                mean: x(4)?,
                ci_low: x(5)?,
                ci_high: x(6)?,
            })
        })
        .collect()
}
