//! Simulation analyses: recovery by structure, accuracy-residualized
//! regressions, the per-slice mechanism contrast, the factorial ANOVA, knee
//! points and per-panel series.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};

use asymrd::simgen::{knee_point, Structure};
use asymrd::stats::{
    cell_demeaned_anova, component_regression, magnitude_regression, ols, residualize_within_slice,
    spearman_test, two_sample_proportion_test, AnovaFactors, RegressionFit, SliceRegressions,
    StatsError,
};

use super::{bh_opt, fdr_of, numeric_columns, test_cells, Emitter};
use crate::config::{Config, SignatureSource};
use crate::error::CliError;
use crate::table::{num, opt, Table, NA};

pub const SIM_ANALYSES: [&str; 7] = [
    "recovery",
    "residual_regressions",
    "mechanism",
    "anova",
    "knee",
    "panels",
    "correlations",
];

/// Metrics that get a plot panel. `collapse` is averaged over every
/// replicate; the others over non-collapsed replicates only.
const PANEL_METRICS: [&str; 16] = [
    "collapse",
    "accuracy",
    "frobenius_index",
    "offdiag_frobenius",
    "f_pairs",
    "mean_delta",
    "true_auc",
    "true_beta_abs",
    "true_kappa",
    "hat_auc",
    "hat_beta_abs",
    "hat_kappa",
    "corr_sym",
    "corr_antisym",
    "strict_pass",
    "s_star_true",
];

/// One `(λ_gen, N)` facet.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Slice {
    pub lambda_gen: f64,
    pub n_per_row: u64,
}

impl PartialEq for Slice {
    fn eq(&self, o: &Self) -> bool {
        self.lambda_gen.to_bits() == o.lambda_gen.to_bits() && self.n_per_row == o.n_per_row
    }
}
impl Eq for Slice {}

impl Hash for Slice {
    fn hash<H: Hasher>(&self, h: &mut H) {
        self.lambda_gen.to_bits().hash(h);
        self.n_per_row.hash(h);
    }
}

impl PartialOrd for Slice {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Slice {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.lambda_gen
            .total_cmp(&o.lambda_gen)
            .then(self.n_per_row.cmp(&o.n_per_row))
    }
}

impl fmt::Display for Slice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.lambda_gen, self.n_per_row)
    }
}

impl Slice {
    fn cells(&self) -> [String; 2] {
        [num(self.lambda_gen), self.n_per_row.to_string()]
    }
}

pub(crate) struct SimRow {
    pub structure: Structure,
    pub a: f64,
    pub slice: Slice,
    pub seed: u64,
    pub collapse: bool,
}

/// Parsed simulation results: design keys per row plus every other column
/// as optional numbers (booleans become 0/1).
pub(crate) struct SimRows {
    pub rows: Vec<SimRow>,
    values: HashMap<String, Vec<Option<f64>>>,
}

impl SimRows {
    pub fn parse(t: &Table) -> Result<Self, CliError> {
        let data = |m: String| CliError::Data(m);
        let ci = |n: &str| t.col(n);
        let (cs, ca, cl, cn, cseed, ccol) = (
            ci("structure")?,
            ci("a")?,
            ci("lambda_gen")?,
            ci("n_per_row")?,
            ci("seed")?,
            ci("collapse")?,
        );
        let mut rows = Vec::with_capacity(t.rows.len());
        for r in &t.rows {
            let structure: Structure = t.str(r, cs).parse().map_err(data)?;
            let num_at = |c: usize| t.f64(r, c)?.ok_or_else(|| data(format!("missing {}", t.header[c])));
            let int_at = |c: usize| {
                t.str(r, c)
                    .parse::<u64>()
                    .map_err(|_| data(format!("{}: not an integer", t.header[c])))
            };
            rows.push(SimRow {
                structure,
                a: num_at(ca)?,
                slice: Slice {
                    lambda_gen: num_at(cl)?,
                    n_per_row: int_at(cn)?,
                },
                seed: int_at(cseed)?,
                collapse: t.bool(r, ccol)?.ok_or_else(|| data("missing collapse".into()))?,
            });
        }
        let values = numeric_columns(t, &["structure", "flags"])?;
        Ok(Self { rows, values })
    }

    fn column(&self, name: &str) -> Result<&[Option<f64>], CliError> {
        self.values
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| CliError::Data(format!("missing column {name:?}")))
    }

    /// Sorted distinct slices.
    fn slices(&self) -> Vec<Slice> {
        let mut s: Vec<Slice> = self.rows.iter().map(|r| r.slice).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Non-collapsed row indices with every listed column present and finite.
    fn usable(&self, cols: &[&str]) -> Result<Vec<usize>, CliError> {
        let cols: Vec<&[Option<f64>]> = cols.iter().map(|c| self.column(c)).collect::<Result<_, _>>()?;
        Ok((0..self.rows.len())
            .filter(|&i| !self.rows[i].collapse && cols.iter().all(|c| c[i].is_some_and(f64::is_finite)))
            .collect())
    }
}

/// Frontier metric under the configured signature source. `log10_kappa1`
/// is `log10(κ + 1)`.
fn signature_metric(rows: &SimRows, cfg: &Config, metric: &str) -> Result<Vec<Option<f64>>, CliError> {
    let prefix = match cfg.report.signature_source {
        SignatureSource::True => "true_",
        SignatureSource::Hat => "hat_",
    };
    Ok(match metric {
        "log10_kappa1" => rows
            .column(&format!("{prefix}kappa"))?
            .iter()
            .map(|v| v.map(|k| (k + 1.0).log10()))
            .collect(),
        m => rows.column(&format!("{prefix}{m}"))?.to_vec(),
    })
}

const RD_METRICS: [&str; 3] = ["auc", "beta_abs", "log10_kappa1"];

fn finite_at(v: &[Option<f64>], i: usize) -> Option<f64> {
    v[i].filter(|x| x.is_finite())
}

pub(crate) fn run(analysis: &str, rows: &SimRows, cfg: &Config, em: &mut Emitter) -> Result<(), CliError> {
    match analysis {
        "recovery" => recovery(rows, em),
        "residual_regressions" => residual_regressions(rows, cfg, em),
        "mechanism" => mechanism(rows, cfg, em),
        "anova" => anova(rows, cfg, em),
        "knee" => knee(rows, em),
        "panels" => panels(rows, em),
        "correlations" => correlations(rows, cfg, em),
        other => Err(CliError::UnknownAnalysis(other.to_string())),
    }
}

/// Strict-recovery pass fraction among non-collapsed replicates, broad–weak
/// against sink, per slice with BH across slices.
fn recovery(rows: &SimRows, em: &mut Emitter) -> Result<(), CliError> {
    let pass = rows.column("strict_pass")?;
    let slices = rows.slices();
    let mut counts = Vec::new();
    let mut tests = Vec::new();
    for s in &slices {
        let tally = |st: Structure| {
            let idx: Vec<usize> = (0..rows.rows.len())
                .filter(|&i| rows.rows[i].slice == *s && rows.rows[i].structure == st && !rows.rows[i].collapse)
                .collect();
            let k = idx.iter().filter(|&&i| pass[i] == Some(1.0)).count() as u64;
            (k, idx.len() as u64)
        };
        let (bw, sink) = (tally(Structure::BroadWeak), tally(Structure::Sink));
        tests.push(two_sample_proportion_test(bw.0, bw.1, sink.0, sink.1));
        counts.push((bw, sink));
    }
    let fdr = fdr_of(&tests)?;
    let frac = |(k, n): (u64, u64)| (n > 0).then(|| k as f64 / n as f64);
    let out: Vec<Vec<String>> = slices
        .iter()
        .zip(&counts)
        .zip(tests.iter().zip(&fdr))
        .map(|((s, &(bw, sink)), (t, q))| {
            let (fb, fs) = (frac(bw), frac(sink));
            let mut row = s.cells().to_vec();
            row.extend([bw.1.to_string(), bw.0.to_string(), opt(fb)]);
            row.extend([sink.1.to_string(), sink.0.to_string(), opt(fs)]);
            row.push(opt(fb.zip(fs).map(|(a, b)| a - b)));
            row.extend(test_cells(t));
            row.push(opt(*q));
            row.push(fb.zip(fs).map_or_else(|| NA.to_string(), |(a, b)| (a >= b).to_string()));
            row
        })
        .collect();
    em.emit(
        "recovery.csv",
        &[
            "lambda_gen",
            "n_per_row",
            "n_broad_weak",
            "pass_broad_weak",
            "frac_broad_weak",
            "n_sink",
            "pass_sink",
            "frac_sink",
            "difference",
            "z",
            "p_value",
            "p_value_raw",
            "method",
            "p_fdr",
            "broad_weak_ge_sink",
        ],
        &out,
    )
}

/// Residualized metric and design columns over the usable rows.
struct Residualized {
    idx: Vec<usize>,
    resid: Vec<f64>,
    slices: Vec<Slice>,
}

fn residualize(rows: &SimRows, y: &[Option<f64>], extra: &[&str]) -> Result<Result<Residualized, StatsError>, CliError> {
    let mut cols = vec!["accuracy"];
    cols.extend_from_slice(extra);
    let idx: Vec<usize> = rows
        .usable(&cols)?
        .into_iter()
        .filter(|&i| finite_at(y, i).is_some())
        .collect();
    let acc = rows.column("accuracy")?;
    let ys: Vec<f64> = idx.iter().map(|&i| y[i].unwrap()).collect();
    let xs: Vec<f64> = idx.iter().map(|&i| acc[i].unwrap()).collect();
    let slices: Vec<Slice> = idx.iter().map(|&i| rows.rows[i].slice).collect();
    Ok(residualize_within_slice(&ys, &xs, &slices).map(|resid| Residualized { idx, resid, slices }))
}

fn slice_fit_rows(metric: &str, reg: &SliceRegressions, lookup: &HashMap<String, Slice>, out: &mut Vec<Vec<String>>) {
    for sf in &reg.slices {
        let s = lookup[&sf.slice];
        for (t, term) in sf.fit.terms.iter().enumerate() {
            let mut row = vec![reg.model.clone(), metric.to_string()];
            row.extend(s.cells());
            row.extend([
                term.clone(),
                num(sf.fit.estimates[t]),
                num(sf.fit.std_errors[t]),
                num(sf.fit.t_values[t]),
                num(sf.fit.p_values[t]),
                num(sf.p_fdr[t]),
            ]);
            out.push(row);
        }
    }
}

/// Component (breadth, strength, interaction) and magnitude models for each
/// frontier metric after within-slice accuracy residualization. Strength is
/// 0 for channels with no asymmetric pair.
fn residual_regressions(rows: &SimRows, cfg: &Config, em: &mut Emitter) -> Result<(), CliError> {
    let alpha = cfg.report.alpha;
    let (f_pairs, mean_delta, frob) = (rows.column("f_pairs")?, rows.column("mean_delta")?, rows.column("frobenius_index")?);
    let lookup: HashMap<String, Slice> = rows.slices().into_iter().map(|s| (s.to_string(), s)).collect();
    let mut per_slice = Vec::new();
    let mut summary = Vec::new();
    let failed = |model: &str, metric: &str, e: &dyn fmt::Display, summary: &mut Vec<Vec<String>>| {
        let mut row = vec![model.to_string(), metric.to_string(), NA.into()];
        row.extend([NA, NA, NA, NA, NA].map(String::from));
        row.push(format!("not fitted: {e}"));
        summary.push(row);
    };
    for metric in RD_METRICS {
        let y = signature_metric(rows, cfg, metric)?;
        let r = match residualize(rows, &y, &["f_pairs", "frobenius_index"])? {
            Ok(r) => r,
            Err(e) => {
                failed("components", metric, &e, &mut summary);
                failed("magnitude", metric, &e, &mut summary);
                continue;
            }
        };
        let breadth: Vec<f64> = r.idx.iter().map(|&i| f_pairs[i].unwrap()).collect();
        let strength: Vec<f64> = r.idx.iter().map(|&i| mean_delta[i].unwrap_or(0.0)).collect();
        let magnitude: Vec<f64> = r.idx.iter().map(|&i| frob[i].unwrap()).collect();
        let is_sink: Vec<bool> = r.idx.iter().map(|&i| rows.rows[i].structure == Structure::Sink).collect();
        let fits = [
            ("components", component_regression(&r.resid, &breadth, &strength, &is_sink, &r.slices)),
            ("magnitude", magnitude_regression(&r.resid, &magnitude, &is_sink, &r.slices)),
        ];
        for (model, fit) in fits {
            match fit {
                Ok(reg) => {
                    slice_fit_rows(metric, &reg, &lookup, &mut per_slice);
                    for t in reg.summarize(alpha) {
                        summary.push(vec![
                            model.to_string(),
                            metric.to_string(),
                            t.term,
                            num(t.median),
                            num(t.min),
                            num(t.max),
                            t.n_significant.to_string(),
                            t.n_slices.to_string(),
                            String::new(),
                        ]);
                    }
                }
                Err(e) => failed(model, metric, &e, &mut summary),
            }
        }
    }
    em.emit(
        "residual_regression_slices.csv",
        &["model", "metric", "lambda_gen", "n_per_row", "term", "estimate", "std_error", "t", "p_value", "p_fdr"],
        &per_slice,
    )?;
    em.emit(
        "residual_regression_summary.csv",
        &["model", "metric", "term", "median", "min", "max", "n_significant", "n_slices", "note"],
        &summary,
    )
}

/// Per-slice slopes of the residualized metric on `a`, separately by
/// structure, plus the `a × sink` interaction from the pooled model.
pub(crate) struct MechanismSlice {
    pub slice: Slice,
    pub n_broad_weak: usize,
    pub n_sink: usize,
    pub slope_broad_weak: Option<(f64, f64)>,
    pub slope_sink: Option<(f64, f64)>,
    pub interaction: Option<(f64, f64)>,
}

fn term_of(fit: Result<RegressionFit, StatsError>, term: &str) -> Option<(f64, f64)> {
    let f = fit.ok()?;
    let i = f.index(term)?;
    Some((f.estimates[i], f.p_values_raw[i]))
}

pub(crate) fn mechanism_slices(rows: &SimRows, y: &[Option<f64>]) -> Result<Vec<MechanismSlice>, CliError> {
    let r = residualize(rows, y, &[])?.map_err(|e| CliError::Data(format!("residualization: {e}")))?;
    let mut by_slice: BTreeMap<Slice, Vec<usize>> = BTreeMap::new();
    for (k, s) in r.slices.iter().enumerate() {
        by_slice.entry(*s).or_default().push(k);
    }
    Ok(by_slice
        .into_iter()
        .map(|(slice, members)| {
            let a = |k: usize| rows.rows[r.idx[k]].a;
            let sink = |k: usize| rows.rows[r.idx[k]].structure == Structure::Sink;
            let slope = |want_sink: bool| {
                let m: Vec<usize> = members.iter().copied().filter(|&k| sink(k) == want_sink).collect();
                let ys: Vec<f64> = m.iter().map(|&k| r.resid[k]).collect();
                let xs: Vec<f64> = m.iter().map(|&k| a(k)).collect();
                (m.len(), term_of(ols(&ys, &[("a", &xs)]), "a"))
            };
            let (n_bw, s_bw) = slope(false);
            let (n_sink, s_sink) = slope(true);
            let ys: Vec<f64> = members.iter().map(|&k| r.resid[k]).collect();
            let xa: Vec<f64> = members.iter().map(|&k| a(k)).collect();
            let xs: Vec<f64> = members.iter().map(|&k| sink(k) as u8 as f64).collect();
            let xi: Vec<f64> = xa.iter().zip(&xs).map(|(a, s)| a * s).collect();
            let inter = term_of(ols(&ys, &[("a", &xa), ("sink", &xs), ("a:sink", &xi)]), "a:sink");
            MechanismSlice {
                slice,
                n_broad_weak: n_bw,
                n_sink,
                slope_broad_weak: s_bw,
                slope_sink: s_sink,
                interaction: inter,
            }
        })
        .collect())
}

fn mechanism(rows: &SimRows, cfg: &Config, em: &mut Emitter) -> Result<(), CliError> {
    let mut out = Vec::new();
    for metric in RD_METRICS {
        let y = signature_metric(rows, cfg, metric)?;
        let slices = mechanism_slices(rows, &y)?;
        let fdr = |get: fn(&MechanismSlice) -> Option<(f64, f64)>| {
            bh_opt(&slices.iter().map(|s| get(s).map(|t| t.1)).collect::<Vec<_>>())
        };
        let q_bw = fdr(|s| s.slope_broad_weak)?;
        let q_sink = fdr(|s| s.slope_sink)?;
        let q_int = fdr(|s| s.interaction)?;
        for (i, s) in slices.iter().enumerate() {
            let mut row = vec![metric.to_string()];
            row.extend(s.slice.cells());
            row.push(s.n_broad_weak.to_string());
            row.push(s.n_sink.to_string());
            for (term, q) in [(s.slope_broad_weak, q_bw[i]), (s.slope_sink, q_sink[i]), (s.interaction, q_int[i])] {
                row.extend([opt(term.map(|t| t.0)), opt(term.map(|t| t.1)), opt(q)]);
            }
            out.push(row);
        }
    }
    em.emit(
        "mechanism.csv",
        &[
            "metric",
            "lambda_gen",
            "n_per_row",
            "n_broad_weak",
            "n_sink",
            "slope_broad_weak",
            "p_broad_weak",
            "p_fdr_broad_weak",
            "slope_sink",
            "p_sink",
            "p_fdr_sink",
            "interaction",
            "p_interaction",
            "p_fdr_interaction",
        ],
        &out,
    )
}

/// Factorial ANOVA with (λ_gen, N, seed) cells as the random-intercept
/// grouping, approximated by cell demeaning. Cells left with fewer than two
/// usable replicates are dropped.
fn anova(rows: &SimRows, cfg: &Config, em: &mut Emitter) -> Result<(), CliError> {
    let mut out = Vec::new();
    for metric in RD_METRICS {
        let y = signature_metric(rows, cfg, metric)?;
        let mut idx: Vec<usize> = (0..rows.rows.len())
            .filter(|&i| !rows.rows[i].collapse && finite_at(&y, i).is_some())
            .collect();
        let cell = |i: usize| (rows.rows[i].slice, rows.rows[i].seed);
        let mut sizes: HashMap<(Slice, u64), usize> = HashMap::new();
        idx.iter().for_each(|&i| *sizes.entry(cell(i)).or_default() += 1);
        idx.retain(|&i| sizes[&cell(i)] >= 2);

        let ys: Vec<f64> = idx.iter().map(|&i| y[i].unwrap()).collect();
        let st: Vec<f64> = idx.iter().map(|&i| (rows.rows[i].structure == Structure::Sink) as u8 as f64).collect();
        let a: Vec<f64> = idx.iter().map(|&i| rows.rows[i].a).collect();
        let l: Vec<f64> = idx.iter().map(|&i| rows.rows[i].slice.lambda_gen).collect();
        let n: Vec<f64> = idx.iter().map(|&i| (rows.rows[i].slice.n_per_row as f64).log10()).collect();
        let cells: Vec<(Slice, u64)> = idx.iter().map(|&i| cell(i)).collect();
        let factors = AnovaFactors {
            structure: &st,
            a: &a,
            lambda_gen: &l,
            log10_n: &n,
        };
        match cell_demeaned_anova(&ys, factors, &cells) {
            Ok(t) => {
                for term in &t.terms {
                    out.push(vec![
                        metric.to_string(),
                        term.term.clone(),
                        term.df.to_string(),
                        num(term.sum_sq),
                        opt(term.f),
                        opt(term.p_value),
                        opt(term.p_value_raw),
                        term.absorbed.to_string(),
                        num(t.df_resid),
                        t.n.to_string(),
                        t.n_cells.to_string(),
                        t.label.clone(),
                    ]);
                }
            }
            Err(e) => {
                let mut row = vec![metric.to_string()];
                row.extend([NA; 10].map(String::from));
                row.push(format!("not fitted: {e}"));
                out.push(row);
            }
        }
    }
    em.emit(
        "anova.csv",
        &["metric", "term", "df", "sum_sq", "f", "p_value", "p_value_raw", "absorbed", "df_resid", "n", "n_cells", "label"],
        &out,
    )
}

/// Knee of mean breadth against `a`, per structure and slice, and pooled
/// over slices.
fn knee(rows: &SimRows, em: &mut Emitter) -> Result<(), CliError> {
    let f = rows.column("f_pairs")?;
    let usable = rows.usable(&["f_pairs"])?;
    let mut out = Vec::new();
    let mut structures: Vec<Structure> = rows.rows.iter().map(|r| r.structure).collect();
    structures.sort();
    structures.dedup();
    let slices: Vec<Option<Slice>> = std::iter::once(None).chain(rows.slices().into_iter().map(Some)).collect();
    for st in &structures {
        for s in &slices {
            let mut by_a: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
            for &i in &usable {
                let r = &rows.rows[i];
                if r.structure == *st && s.is_none_or(|s| s == r.slice) {
                    // Nonnegative floats order like their bit patterns.
                    let e = by_a.entry(r.a.to_bits()).or_insert((r.a, 0.0, 0));
                    e.1 += f[i].unwrap();
                    e.2 += 1;
                }
            }
            let xs: Vec<f64> = by_a.values().map(|v| v.0).collect();
            let ys: Vec<f64> = by_a.values().map(|v| v.1 / v.2 as f64).collect();
            let mut row = vec![st.label().to_string()];
            match s {
                Some(s) => row.extend(s.cells()),
                None => row.extend(["all".to_string(), "all".to_string()]),
            }
            row.push(xs.len().to_string());
            match knee_point(&xs, &ys) {
                Ok(k) => row.extend([num(k.a_knee), num(k.sse_linear), num(k.sse_two_segment), num(k.improvement), "ok".into()]),
                Err(e) => {
                    row.extend([NA; 4].map(String::from));
                    row.push(e.to_string());
                }
            }
            out.push(row);
        }
    }
    em.emit(
        "knee.csv",
        &["structure", "lambda_gen", "n_per_row", "n_points", "a_knee", "sse_linear", "sse_two_segment", "improvement", "status"],
        &out,
    )
}

/// One tidy file per metric: x = a, facets = λ_gen, series = N × structure.
fn panels(rows: &SimRows, em: &mut Emitter) -> Result<(), CliError> {
    for metric in PANEL_METRICS {
        let v = rows.column(metric)?;
        let mut groups: BTreeMap<(Slice, Structure, u64), (f64, Vec<f64>)> = BTreeMap::new();
        for (i, r) in rows.rows.iter().enumerate() {
            if metric != "collapse" && r.collapse {
                continue;
            }
            let e = groups.entry((r.slice, r.structure, r.a.to_bits())).or_insert((r.a, Vec::new()));
            if let Some(x) = finite_at(v, i) {
                e.1.push(x);
            }
        }
        let out: Vec<Vec<String>> = groups
            .into_iter()
            .map(|((s, st, _), (a, xs))| {
                let n = xs.len();
                let mean = (n > 0).then(|| xs.iter().sum::<f64>() / n as f64);
                let sd = mean
                    .filter(|_| n > 1)
                    .map(|m| (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
                let mut row = s.cells().to_vec();
                row.extend([st.label().to_string(), num(a), opt(mean), opt(sd), n.to_string()]);
                row
            })
            .collect();
        em.emit(
            &format!("panel_{metric}.csv"),
            &["lambda_gen", "n_per_row", "structure", "a", "mean", "sd", "n"],
            &out,
        )?;
    }
    Ok(())
}

/// Spearman correlations between asymmetry indices and frontier metrics,
/// pooled and per structure, with BH across the whole table.
fn correlations(rows: &SimRows, cfg: &Config, em: &mut Emitter) -> Result<(), CliError> {
    let subsets: [(&str, Option<Structure>); 3] =
        [("all", None), ("broad_weak", Some(Structure::BroadWeak)), ("sink", Some(Structure::Sink))];
    let mut keys = Vec::new();
    let mut tests = Vec::new();
    for (label, st) in subsets {
        for asym in ["frobenius_index", "f_pairs", "mean_delta"] {
            let x = rows.column(asym)?;
            for metric in RD_METRICS {
                let y = signature_metric(rows, cfg, metric)?;
                let idx: Vec<usize> = (0..rows.rows.len())
                    .filter(|&i| {
                        !rows.rows[i].collapse
                            && st.is_none_or(|s| rows.rows[i].structure == s)
                            && finite_at(x, i).is_some()
                            && finite_at(&y, i).is_some()
                    })
                    .collect();
                let xs: Vec<f64> = idx.iter().map(|&i| x[i].unwrap()).collect();
                let ys: Vec<f64> = idx.iter().map(|&i| y[i].unwrap()).collect();
                keys.push((label, asym, metric, idx.len()));
                tests.push(spearman_test(&xs, &ys));
            }
        }
    }
    let fdr = fdr_of(&tests)?;
    let out: Vec<Vec<String>> = keys
        .iter()
        .zip(&tests)
        .zip(&fdr)
        .map(|((&(label, asym, metric, n), t), q)| {
            let mut row = vec![label.to_string(), asym.to_string(), metric.to_string(), n.to_string()];
            row.extend(test_cells(t));
            row.push(opt(*q));
            row
        })
        .collect();
    em.emit(
        "correlations.csv",
        &["subset", "asymmetry_metric", "rd_metric", "n", "rho", "p_value", "p_value_raw", "method", "p_fdr"],
        &out,
    )
}
