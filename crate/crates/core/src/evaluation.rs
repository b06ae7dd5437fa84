//! Detection metrics, hyperparameter selection on rotated in-distribution
//! data, timestep sweeps and benchmark reports. OOD is the positive class
//! throughout: higher scores mean more abnormal.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{rotate_batch, ImageBatch};
use crate::distances::Distance;
use crate::error::{Error, Result};
use crate::projection::Projector;
use crate::scoring::{batch_score, PrConfig, PrScorer, ProjectionScorer, ScoreVector, Scorer};

fn non_empty(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidArgument(format!("{} scores are empty", name)));
    }
    if let Some(index) = v.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore { index });
    }
    Ok(())
}

/// `P(ood > id) + ½·P(ood = id)` from midranks of the pooled scores.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    non_empty("ID", id)?;
    non_empty("OOD", ood)?;
    let mut all: Vec<(f64, bool)> = id.iter().map(|&s| (s, false)).chain(ood.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the rank sum of the OOD scores, kept integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the midrank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u64;
        let pos = all[i..=j].iter().filter(|e| e.1).count() as u64;
        twice_rank_sum += twice_mid * pos;
        i = j + 1;
    }
    let (n, m) = (id.len() as u64, ood.len() as u64);
    // 2U = 2·ranksum − m(m + 1)
    let twice_u = twice_rank_sum - m * (m + 1);
    Ok(twice_u as f64 / (2 * n * m) as f64)
}

/// TNR at the largest threshold whose TPR is at least `tpr`.
///
/// An OOD score counts as detected when it lies strictly above the
/// threshold. With `m = ⌈tpr·|ood|⌉` and `o_m` the `m`-th largest OOD score,
/// every admissible threshold lies below `o_m`, and the TNR is the fraction
/// of ID scores strictly below `o_m`.
pub fn tnr_at_tpr(id: &[f64], ood: &[f64], tpr: f64) -> Result<f64> {
    non_empty("ID", id)?;
    non_empty("OOD", ood)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::InvalidArgument(format!("tpr {} outside (0, 1]", tpr)));
    }
    let mut sorted = ood.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let m = ((tpr * ood.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let o_m = sorted[m.min(ood.len()) - 1];
    Ok(id.iter().filter(|&&s| s < o_m).count() as f64 / id.len() as f64)
}

pub const DEFAULT_TPR: f64 = 0.95;

/// The grid pair with the highest value of `auroc_of`. Ties go to the
/// lexicographically smallest pair.
pub fn select_hparams(
    grid: &[(usize, usize)],
    mut auroc_of: impl FnMut((usize, usize)) -> Result<f64>,
) -> Result<((usize, usize), Vec<((usize, usize), f64)>)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("hyperparameter grid is empty".into()));
    }
    let mut pairs = grid.to_vec();
    pairs.sort();
    pairs.dedup();
    let mut table = Vec::with_capacity(pairs.len());
    let mut best: Option<((usize, usize), f64)> = None;
    for p in pairs {
        let a = auroc_of(p)?;
        table.push((p, a));
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((p, a));
        }
    }
    Ok((best.expect("non-empty grid").0, table))
}

/// ID images against their 90°, 180° and 270° rotations, pooled.
pub fn rotated_pool(id: &ImageBatch) -> Result<ImageBatch> {
    let rots = (1..=3).map(|k| rotate_batch(id, k)).collect::<Result<Vec<_>>>()?;
    ImageBatch::concat(&rots.iter().collect::<Vec<_>>())
}

/// Picks `(α, β)` by how well Projection Regret separates ID data from its
/// rotations.
pub fn select_hparams_rotated(
    projector: &dyn Projector,
    distance: &dyn Distance,
    id: &ImageBatch,
    grid: &[(usize, usize)],
    n_alpha: usize,
    n_beta: usize,
    seed: u64,
) -> Result<((usize, usize), Vec<((usize, usize), f64)>)> {
    let rotated = rotated_pool(id)?;
    select_hparams(grid, |(alpha, beta)| {
        let scorer = PrScorer {
            projector,
            distance,
            cfg: PrConfig {
                alpha,
                beta,
                n_alpha,
                n_beta,
                ensemble: vec![(alpha, beta)],
            },
            ensemble: false,
        };
        let s_id = batch_score(id, &scorer, seed)?;
        let s_rot = batch_score(&rotated, &scorer, seed)?;
        auroc(&s_id, &s_rot)
    })
}

/// Pairs `(a, b)` with `|a − center.0| ≤ radius` and `b ∈ {a − 1, a}`,
/// clipped to `[0, n]`, sorted and deduplicated.
pub fn build_ensemble_c(center: (usize, usize), radius: usize, n: usize) -> Vec<(usize, usize)> {
    let lo = center.0.saturating_sub(radius);
    let hi = (center.0 + radius).min(n);
    let mut out = Vec::new();
    for a in lo..=hi {
        if a >= 1 {
            out.push((a, a - 1));
        }
        out.push((a, a));
    }
    out.sort();
    out.dedup();
    out
}

/// Elementwise product. Inputs with negative entries are first shifted by
/// their minimum; the shift is recorded in the result's notes.
pub fn combine_multiplicative(s1: &ScoreVector, s2: &ScoreVector) -> Result<ScoreVector> {
    if s1.len() != s2.len() {
        return Err(Error::Shape(format!("{} vs {} scores", s1.len(), s2.len())));
    }
    let mut out = ScoreVector::new(Vec::new());
    let shifted = |s: &ScoreVector, name: &str, out: &mut ScoreVector| -> Vec<f64> {
        let min = s.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < 0.0 {
            out.notes.insert(format!("shift_{}", name), format!("{}", -min));
            s.scores.iter().map(|v| v - min).collect()
        } else {
            s.scores.clone()
        }
    };
    let a = shifted(s1, "first", &mut out);
    let b = shifted(s2, "second", &mut out);
    out.scores = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    out.seed = s1.seed;
    out.method = format!("{}*{}", s1.method, s2.method);
    out.metric = s1.metric.clone();
    Ok(out)
}

/// One projection score family scanned over timesteps.
pub struct SweepVariant<'a> {
    pub name: String,
    pub projector: &'a dyn Projector,
    pub distance: &'a dyn Distance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub variant: String,
    pub index: usize,
    pub t: f64,
    pub auroc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,index,t,auroc\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.variant, r.index, r.t, r.auroc);
        }
        s
    }

    /// Highest AUROC of a variant over its indices, with the index.
    pub fn best(&self, variant: &str) -> Option<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant)
            .fold(None, |acc: Option<(usize, f64)>, r| match acc {
                Some((_, a)) if a >= r.auroc => acc,
                _ => Some((r.index, r.auroc)),
            })
    }

    /// A line chart of AUROC against timestep index, one polyline per variant.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 400.0, 40.0);
        let max_i = self.rows.iter().map(|r| r.index).max().unwrap_or(1).max(1) as f64;
        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        );
        let _ = writeln!(
            s,
            "<line x1=\"{pad}\" y1=\"{y}\" x2=\"{x}\" y2=\"{y}\" stroke=\"black\"/><line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{y}\" stroke=\"black\"/>",
            y = h - pad,
            x = w - pad
        );
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.variant.as_str()) {
                names.push(&r.variant);
            }
        }
        for (k, name) in names.iter().enumerate() {
            let pts: Vec<String> = self
                .rows
                .iter()
                .filter(|r| r.variant == *name)
                .map(|r| {
                    let x = pad + (w - 2.0 * pad) * r.index as f64 / max_i;
                    let y = h - pad - (h - 2.0 * pad) * r.auroc;
                    format!("{:.1},{:.1}", x, y)
                })
                .collect();
            let c = colors[k % colors.len()];
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{}\" points=\"{}\"/>", c, pts.join(" "));
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" fill=\"{}\" font-size=\"12\">{}</text>",
                w - 160.0,
                pad + 16.0 * (k as f64 + 1.0),
                c,
                name
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// AUROC of every variant at every schedule index.
pub fn sweep_timesteps(
    variants: &[SweepVariant<'_>],
    id: &ImageBatch,
    ood: &ImageBatch,
    n: usize,
    seed: u64,
) -> Result<SweepTable> {
    let mut table = SweepTable::default();
    for v in variants {
        let s = v.projector.schedule();
        for index in 0..=s.n() {
            let scorer = ProjectionScorer {
                projector: v.projector,
                distance: v.distance,
                index,
                n,
            };
            let a = auroc(&batch_score(id, &scorer, seed)?, &batch_score(ood, &scorer, seed)?)?;
            table.rows.push(SweepRow {
                variant: v.name.clone(),
                index,
                t: s.t(index),
                auroc: a,
            });
        }
    }
    Ok(table)
}

pub struct Task {
    pub name: String,
    pub id: ImageBatch,
    pub ood: ImageBatch,
}

/// A scorer under a method name. Several entries may share a name with
/// different seeds; their metrics are averaged in the report.
pub struct Method<'a> {
    pub name: String,
    pub seed: u64,
    pub scorer: &'a dyn Scorer,
    pub metric: String,
    pub ensemble: Vec<(usize, usize)>,
}

pub struct BenchmarkSpec<'a> {
    pub methods: Vec<Method<'a>>,
    pub tasks: Vec<Task>,
    pub config_hash: String,
    /// Written to `sweeps/<name>.csv`.
    pub sweeps: Vec<(String, SweepTable)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub auroc: f64,
    pub tnr95: f64,
    pub id_scores: String,
    pub ood_scores: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub task: String,
    pub auroc: f64,
    pub tnr95: f64,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub dir: PathBuf,
    pub per_seed: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    pub fn auroc(&self, method: &str, task: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.task == task)
            .map(|r| r.auroc)
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Scores every method on every task and writes a report directory:
/// `report.txt`, `metrics.csv` (seed-averaged), `metrics_per_seed.csv`,
/// `scores/*.prtc`, `sweeps/*.csv` and `manifest.txt`. An existing
/// directory is never overwritten.
pub fn run_benchmark(spec: &BenchmarkSpec<'_>, dir: impl AsRef<Path>) -> Result<EvalReport> {
    let dir = dir.as_ref();
    if dir.exists() {
        return Err(Error::InvalidArgument(format!(
            "report directory {} already exists",
            dir.display()
        )));
    }
    if spec.methods.is_empty() || spec.tasks.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one method and one task".into()));
    }
    let start = Instant::now();
    let scores_dir = dir.join("scores");
    fs::create_dir_all(&scores_dir).map_err(|e| Error::io(&scores_dir, e))?;
    let mut per_seed = Vec::new();
    for task in &spec.tasks {
        for m in &spec.methods {
            let save = |which: &str, data: &ImageBatch| -> Result<(Vec<f64>, String)> {
                let s = batch_score(data, m.scorer, m.seed)?;
                let mut sv = ScoreVector::new(s.clone());
                sv.seed = m.seed;
                sv.metric = m.metric.clone();
                sv.method = m.name.clone();
                sv.ensemble = m.ensemble.clone();
                sv.config_hash = spec.config_hash.clone();
                let file = format!("{}__{}__seed{}__{}.prtc", sanitize(&task.name), sanitize(&m.name), m.seed, which);
                let hash = sv.save(scores_dir.join(&file))?;
                Ok((s, format!("{}@{}", file, hash)))
            };
            let (s_id, f_id) = save("id", &task.id)?;
            let (s_ood, f_ood) = save("ood", &task.ood)?;
            per_seed.push(MetricRow {
                method: m.name.clone(),
                task: task.name.clone(),
                seed: m.seed,
                auroc: auroc(&s_id, &s_ood)?,
                tnr95: tnr_at_tpr(&s_id, &s_ood, DEFAULT_TPR)?,
                id_scores: f_id,
                ood_scores: f_ood,
            });
        }
    }
    let mut seeds: Vec<u64> = spec.methods.iter().map(|m| m.seed).collect();
    seeds.sort();
    seeds.dedup();
    write_report(dir, per_seed, &spec.sweeps, &spec.config_hash, &seeds, start)
}

/// Writes a report for precomputed metric rows into a new directory.
pub fn report_rows(
    rows: Vec<MetricRow>,
    config_hash: &str,
    seeds: &[u64],
    dir: impl AsRef<Path>,
) -> Result<EvalReport> {
    let dir = dir.as_ref();
    if dir.exists() {
        return Err(Error::InvalidArgument(format!(
            "report directory {} already exists",
            dir.display()
        )));
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("nothing to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_report(dir, rows, &[], config_hash, seeds, Instant::now())
}

fn write_report(
    dir: &Path,
    per_seed: Vec<MetricRow>,
    sweeps: &[(String, SweepTable)],
    config_hash: &str,
    seeds: &[u64],
    start: Instant,
) -> Result<EvalReport> {
    let mut summary: Vec<SummaryRow> = Vec::new();
    for r in &per_seed {
        match summary.iter_mut().find(|s| s.method == r.method && s.task == r.task) {
            Some(s) => {
                s.auroc += r.auroc;
                s.tnr95 += r.tnr95;
                s.seeds.push(r.seed);
            }
            None => summary.push(SummaryRow {
                method: r.method.clone(),
                task: r.task.clone(),
                auroc: r.auroc,
                tnr95: r.tnr95,
                seeds: vec![r.seed],
            }),
        }
    }
    for s in &mut summary {
        s.auroc /= s.seeds.len() as f64;
        s.tnr95 /= s.seeds.len() as f64;
    }

    let write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    let mut csv = String::from("method,task,auroc,tnr95\n");
    for s in &summary {
        let _ = writeln!(csv, "{},{},{},{}", s.method, s.task, s.auroc, s.tnr95);
    }
    write("metrics.csv", csv)?;
    let mut csv = String::from("method,task,seed,auroc,tnr95,id_scores,ood_scores\n");
    for r in &per_seed {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.method, r.task, r.seed, r.auroc, r.tnr95, r.id_scores, r.ood_scores
        );
    }
    write("metrics_per_seed.csv", csv)?;
    if !sweeps.is_empty() {
        let sd = dir.join("sweeps");
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        for (name, table) in sweeps {
            let p = sd.join(format!("{}.csv", sanitize(name)));
            fs::write(&p, table.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
    }
    let wall = start.elapsed().as_secs_f64();
    let mut txt = String::from("OOD detection report (OOD = positive class)\n\n");
    let _ = writeln!(txt, "{:<28} {:<20} {:>8} {:>8}  seeds", "method", "task", "AUROC", "TNR95");
    for s in &summary {
        let _ = writeln!(
            txt,
            "{:<28} {:<20} {:>8.4} {:>8.4}  {:?}",
            s.method, s.task, s.auroc, s.tnr95, s.seeds
        );
    }
    let _ = writeln!(txt, "\nper seed:");
    for r in &per_seed {
        let _ = writeln!(
            txt,
            "  {} / {} / seed {}: AUROC {:.4}, TNR95 {:.4}\n    id: {}\n    ood: {}",
            r.method, r.task, r.seed, r.auroc, r.tnr95, r.id_scores, r.ood_scores
        );
    }
    let _ = writeln!(txt, "\nwall clock: {:.1}s", wall);
    write("report.txt", txt)?;
    let mut manifest = format!("config_hash={}\ncode_version={}\n", config_hash, crate::CODE_VERSION);
    let _ = writeln!(manifest, "seeds={}", seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    write("manifest.txt", manifest)?;
    Ok(EvalReport {
        dir: dir.to_path_buf(),
        per_seed,
        summary,
        wall_clock_secs: wall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[3.0], &[3.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.75);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn tnr_examples() {
        assert_eq!(tnr_at_tpr(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0], 0.95).unwrap(), 0.5);
        assert_eq!(tnr_at_tpr(&[0.0, 1.0], &[5.0, 6.0], 0.95).unwrap(), 1.0);
        assert!(tnr_at_tpr(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn ensemble_c_rule() {
        let c = build_ensemble_c((9, 8), 2, 17);
        for p in crate::scoring::CIFAR_ENSEMBLE {
            assert!(c.contains(&p), "{:?}", p);
        }
        assert_eq!(build_ensemble_c((8, 8), 0, 17), vec![(8, 7), (8, 8)]);
        assert!(build_ensemble_c((17, 17), 1, 17).iter().all(|&(a, b)| a <= 17 && b <= 17));
        assert_eq!(build_ensemble_c((0, 0), 1, 17), vec![(0, 0), (1, 0), (1, 1)]);
    }

    #[test]
    fn selection_rule() {
        let (best, _) = select_hparams(&[(8, 8)], |_| Ok(0.1)).unwrap();
        assert_eq!(best, (8, 8));
        let (best, _) = select_hparams(&[(9, 9), (8, 7), (7, 7)], |p| Ok(if p == (8, 7) { 0.9 } else { 0.6 })).unwrap();
        assert_eq!(best, (8, 7));
        let (best, _) = select_hparams(&[(8, 7), (7, 7)], |_| Ok(0.7)).unwrap();
        assert_eq!(best, (7, 7));
        assert!(select_hparams(&[], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn multiplicative_combination() {
        let s1 = ScoreVector::new(vec![1.0, 2.0, -1.0]);
        let ones = ScoreVector::new(vec![1.0; 3]);
        let c = combine_multiplicative(&s1, &ones).unwrap();
        assert_eq!(c.scores, vec![2.0, 3.0, 0.0]);
        assert_eq!(c.notes.get("shift_first").map(|s| s.as_str()), Some("1"));
        let pos = ScoreVector::new(vec![1.0, 2.0, 0.5]);
        assert_eq!(combine_multiplicative(&pos, &ones).unwrap().scores, pos.scores);
        let zeros = ScoreVector::new(vec![0.0; 3]);
        assert_eq!(combine_multiplicative(&zeros, &pos).unwrap().scores, vec![0.0; 3]);
        assert!(combine_multiplicative(&pos, &ScoreVector::new(vec![1.0])).is_err());
    }
}
