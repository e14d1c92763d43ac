//! Chart-to-world alignment, localization error, and the robustness sweep.
//!
//! A trained model emits pseudo-coordinates in an arbitrary frame. Each
//! evaluation run predicts every position under seed-keyed antenna subsets,
//! fits one affine map onto the ground truth, and reports the mean
//! Euclidean error of the aligned predictions.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::models::{AntennaSubset, Network};
use crate::sim::{Point, Snapshot};
use crate::tensor::{ParamSet, Tensor};
use crate::training::{sample_subset_fixed_n, stream_rng};

/// Snapshots per evaluation batch; each batch gets its own subset.
pub const DEFAULT_EVAL_BATCH: usize = 64;

/// Relative eigenvalue floor of the centered design below which the fit is
/// declared degenerate.
const DEGENERACY_RATIO: f64 = 1e-12;

/// `x ↦ A·x + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
    /// Ratio of the singular values of `A`; infinite when `A` is singular.
    pub condition: f64,
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            a: [[1.0, 0.0], [0.0, 1.0]],
            b: [0.0, 0.0],
            condition: 1.0,
        }
    }

    pub fn new(a: [[f64; 2]; 2], b: [f64; 2]) -> Self {
        Self {
            a,
            b,
            condition: condition_2x2(a),
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.b[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.b[1],
        ]
    }
}

/// Singular-value ratio of a 2×2 matrix.
fn condition_2x2(a: [[f64; 2]; 2]) -> f64 {
    // eigenvalues of AᵀA
    let p = a[0][0] * a[0][0] + a[1][0] * a[1][0];
    let q = a[0][1] * a[0][1] + a[1][1] * a[1][1];
    let r = a[0][0] * a[0][1] + a[1][0] * a[1][1];
    let mean = 0.5 * (p + q);
    let rad = (0.25 * (p - q) * (p - q) + r * r).sqrt();
    let (hi, lo) = (mean + rad, (mean - rad).max(0.0));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).sqrt()
    }
}

/// Least-squares affine map taking `pred` onto `truth`.
///
/// Solves the normal equations of the homogeneous design `[x, y, 1]`. The
/// predictions are centered first, which makes the 3×3 Gram matrix block
/// diagonal (a 2×2 block and the count) without changing the minimizer.
pub fn fit_affine(pred: &[Point], truth: &[Point]) -> Result<AffineTransform> {
    if pred.len() != truth.len() {
        return Err(Error::Usage(format!(
            "fit_affine: {} predictions vs {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "{} points; an affine fit needs at least 3 non-collinear points",
            pred.len()
        )));
    }
    if pred.iter().chain(truth).flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("fit_affine: non-finite coordinates".into()));
    }
    let n = pred.len() as f64;
    let mean = |pts: &[Point]| {
        let s = pts
            .iter()
            .fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
        [s[0] / n, s[1] / n]
    };
    let (mp, mt) = (mean(pred), mean(truth));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    // cross[j][i] = Σ (truth_j − mt_j)(pred_i − mp_i)
    let mut cross = [[0.0; 2]; 2];
    for (p, t) in pred.iter().zip(truth) {
        let (x, y) = (p[0] - mp[0], p[1] - mp[1]);
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
        for j in 0..2 {
            let tj = t[j] - mt[j];
            cross[j][0] += tj * x;
            cross[j][1] += tj * y;
        }
    }
    let det = sxx * syy - sxy * sxy;
    let trace = sxx + syy;
    let lo = 0.5 * trace - (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    if !(trace > 0.0) || lo <= DEGENERACY_RATIO * trace || !(det > 0.0) {
        return Err(Error::DegenerateFit(
            "predictions are collinear or coincident; the affine design has rank < 3".into(),
        ));
    }
    let inv = [[syy / det, -sxy / det], [-sxy / det, sxx / det]];
    let mut a = [[0.0; 2]; 2];
    for j in 0..2 {
        a[j][0] = cross[j][0] * inv[0][0] + cross[j][1] * inv[1][0];
        a[j][1] = cross[j][0] * inv[0][1] + cross[j][1] * inv[1][1];
    }
    let b = [
        mt[0] - a[0][0] * mp[0] - a[0][1] * mp[1],
        mt[1] - a[1][0] * mp[0] - a[1][1] * mp[1],
    ];
    Ok(AffineTransform::new(a, b))
}

/// Mean Euclidean distance between paired points.
pub fn mae(pred_aligned: &[Point], truth: &[Point]) -> Result<f64> {
    if pred_aligned.len() != truth.len() || truth.is_empty() {
        return Err(Error::Usage(format!(
            "mae: need equal nonempty lists, got {} and {}",
            pred_aligned.len(),
            truth.len()
        )));
    }
    let total: f64 = pred_aligned
        .iter()
        .zip(truth)
        .map(|(p, t)| (p[0] - t[0]).hypot(p[1] - t[1]))
        .sum();
    Ok(total / truth.len() as f64)
}

/// Anything that maps snapshots observed through an antenna subset to 2D.
pub trait Localizer: Sync {
    fn a_max(&self) -> usize;
    fn locate(&self, batch: &[&Snapshot], subset: &AntennaSubset) -> Result<Vec<Point>>;
}

/// A network with its parameters.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub network: Network,
    pub params: ParamSet,
}

impl Localizer for TrainedModel {
    fn a_max(&self) -> usize {
        self.network.a_max()
    }

    fn locate(&self, batch: &[&Snapshot], subset: &AntennaSubset) -> Result<Vec<Point>> {
        let inputs: Vec<&[Tensor]> = batch.iter().map(|s| s.cirs.as_slice()).collect();
        self.network.predict(&self.params, &inputs, subset)
    }
}

/// Subset for evaluation batch `batch` at `n_e` antennas; depends only on
/// `(seed, n_e, batch)` so every model sees the same draws.
pub fn evaluation_subset(a_max: usize, n_e: usize, seed: u64, batch: u64) -> Result<AntennaSubset> {
    let mut rng = stream_rng(seed, &format!("eval-subset/{n_e}"), batch);
    sample_subset_fixed_n(a_max, n_e, &mut rng)
}

/// Result of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mae: f64,
    pub n_batches: usize,
    pub transform: AffineTransform,
}

/// Predicts every snapshot in batches of `batch_size`, each batch under a
/// fresh seed-keyed `n_e`-subset, then fits one affine map over all
/// predictions and returns the aligned MAE.
pub fn evaluate_model(
    model: &dyn Localizer,
    snapshots: &[Snapshot],
    n_e: usize,
    seed: u64,
    batch_size: usize,
) -> Result<Evaluation> {
    let a_max = model.a_max();
    if n_e == 1 {
        return Err(Error::ExcludedSingleAntenna);
    }
    if n_e < 2 || n_e > a_max {
        return Err(Error::Config(format!(
            "evaluation antenna count {n_e} outside 2..={a_max}"
        )));
    }
    if batch_size == 0 || snapshots.is_empty() {
        return Err(Error::Config(
            "evaluation needs a positive batch size and at least one snapshot".into(),
        ));
    }
    let mut pred = Vec::with_capacity(snapshots.len());
    let mut n_batches = 0;
    for (b, chunk) in snapshots.chunks(batch_size).enumerate() {
        let subset = evaluation_subset(a_max, n_e, seed, b as u64)?;
        let refs: Vec<&Snapshot> = chunk.iter().collect();
        let out = model.locate(&refs, &subset)?;
        if out.len() != chunk.len() {
            return Err(Error::Usage(format!(
                "localizer returned {} points for {} snapshots",
                out.len(),
                chunk.len()
            )));
        }
        pred.extend(out);
        n_batches += 1;
    }
    let truth: Vec<Point> = snapshots.iter().map(|s| s.position).collect();
    let transform = fit_affine(&pred, &truth)?;
    let aligned: Vec<Point> = pred.iter().map(|&p| transform.apply(p)).collect();
    Ok(Evaluation {
        mae: mae(&aligned, &truth)?,
        n_batches,
        transform,
    })
}

/// One model in a sweep.
pub struct SweepEntry<'a> {
    /// Architecture tag, e.g. `adapos`; one heatmap panel per distinct tag.
    pub model: String,
    /// Training strategy, e.g. `fixed-n:3` or `random-n`.
    pub n_t_strategy: String,
    pub localizer: &'a dyn Localizer,
}

/// One evaluated cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub model: String,
    pub n_t_strategy: String,
    pub n_e: usize,
    pub mae_m: f64,
    pub n_batches: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SweepResult {
    /// Ordered by (model, strategy, n_e).
    pub cells: Vec<SweepCell>,
}

pub const SWEEP_CSV_HEADER: &str = "model,n_t_strategy,n_e,mae_m,n_batches,seed";

/// Orders strategies as `fixed-n:2 < … < fixed-n:k < random-n`, falling
/// back to string order for anything else.
fn strategy_key(s: &str) -> (u8, usize, String) {
    if s == "random-n" {
        return (1, 0, String::new());
    }
    match s.strip_prefix("fixed-n:").and_then(|n| n.parse().ok()) {
        Some(n) => (0, n, String::new()),
        None => (2, 0, s.to_string()),
    }
}

/// Evaluates every `(entry, n_e)` cell on up to `jobs` threads. All cells in
/// one `n_e` column share the same subset draws.
pub fn sweep(
    entries: &[SweepEntry<'_>],
    snapshots: &[Snapshot],
    n_e_values: &[usize],
    seed: u64,
    batch_size: usize,
    jobs: usize,
) -> Result<SweepResult> {
    if entries.is_empty() {
        return Err(Error::Config("sweep needs at least one model".into()));
    }
    if n_e_values.is_empty() {
        return Err(Error::Config("sweep needs at least one n_e value".into()));
    }
    let a_max = entries[0].localizer.a_max();
    if let Some(e) = entries.iter().find(|e| e.localizer.a_max() != a_max) {
        return Err(Error::Comparability(format!(
            "model {} / {} has a_max = {}, expected {a_max}",
            e.model,
            e.n_t_strategy,
            e.localizer.a_max()
        )));
    }
    if let Some(&bad) = n_e_values.iter().find(|&&n| n < 2 || n > a_max) {
        if bad == 1 {
            return Err(Error::ExcludedSingleAntenna);
        }
        return Err(Error::Config(format!("n_e = {bad} outside 2..={a_max}")));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by_key(|&i| (entries[i].model.clone(), strategy_key(&entries[i].n_t_strategy)));
    let n_e_sorted: Vec<usize> = n_e_values.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let tasks: Vec<(usize, usize)> = order
        .iter()
        .flat_map(|&i| n_e_sorted.iter().map(move |&n| (i, n)))
        .collect();

    let slots: Vec<Mutex<Option<Result<Evaluation>>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let t = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(i, n_e)) = tasks.get(t) else { break };
        let r = evaluate_model(entries[i].localizer, snapshots, n_e, seed, batch_size);
        *slots[t].lock().unwrap() = Some(r);
    };
    let jobs = jobs.clamp(1, tasks.len());
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }

    let mut cells = Vec::with_capacity(tasks.len());
    for (&(i, n_e), slot) in tasks.iter().zip(slots) {
        let eval = slot.into_inner().unwrap().expect("every task ran")?;
        cells.push(SweepCell {
            model: entries[i].model.clone(),
            n_t_strategy: entries[i].n_t_strategy.clone(),
            n_e,
            mae_m: eval.mae,
            n_batches: eval.n_batches,
            seed,
        });
    }
    Ok(SweepResult { cells })
}

impl SweepResult {
    pub fn get(&self, model: &str, strategy: &str, n_e: usize) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.n_t_strategy == strategy && c.n_e == n_e)
    }

    /// Distinct model tags in output order.
    pub fn models(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.model) {
                out.push(c.model.clone());
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(SWEEP_CSV_HEADER);
        s.push('\n');
        for c in &self.cells {
            // `{}` on f64 is the shortest round-tripping form
            writeln!(
                s,
                "{},{},{},{},{},{}",
                c.model, c.n_t_strategy, c.n_e, c.mae_m, c.n_batches, c.seed
            )
            .unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |reason: String| Error::Validation(format!("sweep CSV: {reason}"));
        if lines.next() != Some(SWEEP_CSV_HEADER) {
            return Err(bad(format!("header must be {SWEEP_CSV_HEADER:?}")));
        }
        let mut cells = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("row {} has {} fields", i + 1, f.len())));
            }
            let num = |s: &str| bad(format!("row {}: cannot parse {s:?}", i + 1));
            cells.push(SweepCell {
                model: f[0].to_string(),
                n_t_strategy: f[1].to_string(),
                n_e: f[2].parse().map_err(|_| num(f[2]))?,
                mae_m: f[3].parse().map_err(|_| num(f[3]))?,
                n_batches: f[4].parse().map_err(|_| num(f[4]))?,
                seed: f[5].parse().map_err(|_| num(f[5]))?,
            });
        }
        Ok(Self { cells })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Heatmap with one panel per model: rows are training strategies,
    /// columns are `n_e`, each cell annotated with its MAE in meters.
    pub fn to_svg(&self) -> String {
        self.svg_for(&self.models())
    }

    /// Heatmap restricted to one model tag.
    pub fn panel_svg(&self, model: &str) -> String {
        self.svg_for(&[model.to_string()])
    }

    fn svg_for(&self, models: &[String]) -> String {
        const CELL_W: f64 = 64.0;
        const CELL_H: f64 = 28.0;
        const LABEL_W: f64 = 88.0;
        const TOP: f64 = 48.0;
        const GAP: f64 = 32.0;
        const BAR_H: f64 = 36.0;

        let cells: Vec<&SweepCell> = self.cells.iter().filter(|c| models.contains(&c.model)).collect();
        let (lo, hi) = cells.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            (lo.min(c.mae_m), hi.max(c.mae_m))
        });
        let panels: Vec<(String, Vec<String>, Vec<usize>)> = models
            .iter()
            .map(|m| {
                let mine: Vec<&&SweepCell> = cells.iter().filter(|c| &c.model == m).collect();
                let mut rows: Vec<String> = Vec::new();
                for c in &mine {
                    if !rows.contains(&c.n_t_strategy) {
                        rows.push(c.n_t_strategy.clone());
                    }
                }
                let cols: Vec<usize> = mine.iter().map(|c| c.n_e).collect::<BTreeSet<_>>().into_iter().collect();
                (m.clone(), rows, cols)
            })
            .collect();
        let panel_w = |cols: usize| LABEL_W + CELL_W * cols as f64;
        let width = panels.iter().map(|p| panel_w(p.2.len())).sum::<f64>()
            + GAP * (panels.len().saturating_sub(1)) as f64
            + 16.0;
        let max_rows = panels.iter().map(|p| p.1.len()).max().unwrap_or(0);
        let height = TOP + CELL_H * (max_rows as f64 + 1.0) + BAR_H + 16.0;

        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
        )
        .unwrap();
        s.push_str("<title>MAE [m] by training strategy and evaluation antenna count</title>\n");
        let mut x0 = 8.0;
        for (model, rows, cols) in &panels {
            writeln!(
                s,
                r#"<text x="{}" y="20" font-size="14" font-weight="bold">{}</text>"#,
                x0,
                xml_escape(model)
            )
            .unwrap();
            for (j, n_e) in cols.iter().enumerate() {
                let x = x0 + LABEL_W + CELL_W * (j as f64 + 0.5);
                writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">n_e={n_e}</text>"#, TOP - 8.0).unwrap();
            }
            for (i, strat) in rows.iter().enumerate() {
                let y = TOP + CELL_H * i as f64;
                writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                    x0 + LABEL_W - 6.0,
                    y + CELL_H * 0.65,
                    xml_escape(strat)
                )
                .unwrap();
                for (j, &n_e) in cols.iter().enumerate() {
                    let x = x0 + LABEL_W + CELL_W * j as f64;
                    let Some(c) = cells
                        .iter()
                        .find(|c| &c.model == model && &c.n_t_strategy == strat && c.n_e == n_e)
                    else {
                        continue;
                    };
                    let t = if hi > lo { (c.mae_m - lo) / (hi - lo) } else { 0.0 };
                    let (fill, ink) = heat_color(t);
                    writeln!(
                        s,
                        r#"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" stroke="white"/>"#
                    )
                    .unwrap();
                    writeln!(
                        s,
                        r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{:.2}</text>"#,
                        x + CELL_W * 0.5,
                        y + CELL_H * 0.65,
                        c.mae_m
                    )
                    .unwrap();
                }
            }
            x0 += panel_w(cols.len()) + GAP;
        }
        let bar_y = TOP + CELL_H * (max_rows as f64 + 0.5);
        let steps = 10;
        for k in 0..steps {
            let t = k as f64 / (steps - 1) as f64;
            let (fill, _) = heat_color(t);
            writeln!(
                s,
                r#"<rect x="{}" y="{bar_y}" width="16" height="10" fill="{fill}"/>"#,
                8.0 + LABEL_W + 16.0 * k as f64
            )
            .unwrap();
        }
        if lo.is_finite() {
            writeln!(
                s,
                r#"<text x="8" y="{}">MAE [m]</text><text x="{}" y="{}" text-anchor="middle">{lo:.2}</text><text x="{}" y="{}" text-anchor="middle">{hi:.2}</text>"#,
                bar_y + 9.0,
                8.0 + LABEL_W + 8.0,
                bar_y + 24.0,
                8.0 + LABEL_W + 16.0 * (steps as f64 - 0.5),
                bar_y + 24.0
            )
            .unwrap();
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_svg()).map_err(|e| Error::io(path, e))
    }
}

/// Low error is light, high error is dark; returns (fill, text color).
fn heat_color(t: f64) -> (String, &'static str) {
    const STOPS: [[f64; 3]; 4] = [
        [255.0, 247.0, 188.0],
        [254.0, 196.0, 79.0],
        [217.0, 95.0, 14.0],
        [102.0, 37.0, 6.0],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let c: Vec<u8> = (0..3)
        .map(|k| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8)
        .collect();
    let ink = if t > 1.5 { "white" } else { "black" };
    (format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]), ink)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
