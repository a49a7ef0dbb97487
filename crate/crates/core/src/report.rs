//! Method × seed experiment runner and the CSV, LaTeX and SVG artifacts it
//! produces.
//!
//! `out/results.csv` is the single source for every table and figure. It is
//! a long-format file with header
//!
//! ```text
//! kind,method,seed,trainable_params,acc_0deg,acc_45deg,high_act_frac,foundation_checksum,layer,stat,value
//! ```
//!
//! `kind = run` rows carry one (method, seed) result and leave `layer`,
//! `stat`, `value` empty. `kind = stat` rows carry one gate statistic for a
//! layer (`1`, `2` or `avg`) and leave the run columns empty. Statistics:
//! `mean_gate`, `high_act_frac` and `hard_skip_frac` on the first 256 45°
//! training images; `jaccard_0v45` between the 0°- and 45°-specialized
//! TauGate masks, each taken on its own mode's first 256 images; and
//! `jaccard_0v45_shared`, both masks taken on one mixed batch. Wall-clock
//! times go to `out/timings.csv` so that `results.csv` is byte-reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{load_mnist, make_foundation_mixture, make_mode_dataset, Batch, Dataset, Mode, Split};
use crate::diagnostics::{
    gate_mask, hard_gate_skip_fraction, high_act_fraction, jaccard_overlap, MaskOverlap,
    HIGH_ACT_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::model::{count_trainable, Backbone, GateMode, Method};
use crate::ndcore::Real;
use crate::train::{evaluate, specialize, streams, train_foundation, TrainConfig};

/// Size of the fixed diagnostic batch (the first images of the relevant mode).
pub const DIAG_BATCH: usize = 256;

/// Rows of the main table, in display order.
pub const MAIN_METHODS: [Method; 5] = [
    Method::Frozen,
    Method::BitFit,
    Method::TauGate,
    Method::Lora,
    Method::FullFt,
];

/// Rows of the ablation table, in display order.
pub const ABLATION_METHODS: [Method; 6] = [
    Method::Frozen,
    Method::GainOnly,
    Method::TauOnly,
    Method::TauGate,
    Method::BitFit,
    Method::Lora,
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub trainable_params: usize,
    pub acc_0deg: Real,
    pub acc_45deg: Real,
    pub high_act_frac: Option<Real>,
    pub wall_seconds: Real,
    pub foundation_checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatRecord {
    pub method: Method,
    pub seed: u64,
    pub layer: String,
    pub stat: String,
    pub value: Real,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub stats: Vec<StatRecord>,
}

impl RunOutput {
    /// Per-seed Jaccard overlaps recorded by an extras run.
    pub fn overlaps(&self) -> Vec<MaskOverlap> {
        let mut by_seed: BTreeMap<u64, (Vec<(String, Real)>, Real)> = BTreeMap::new();
        for s in self.stats.iter().filter(|s| s.stat == STAT_JACCARD) {
            let e = by_seed.entry(s.seed).or_default();
            if s.layer == "avg" {
                e.1 = s.value;
            } else {
                e.0.push((s.layer.clone(), s.value));
            }
        }
        by_seed
            .into_values()
            .map(|(mut layers, average)| {
                layers.sort_by(|a, b| a.0.cmp(&b.0));
                MaskOverlap {
                    per_layer: layers.into_iter().map(|(_, v)| v).collect(),
                    average,
                }
            })
            .collect()
    }

    pub fn stat(&self, method: Method, seed: u64, layer: &str, stat: &str) -> Option<Real> {
        self.stats
            .iter()
            .find(|s| s.method == method && s.seed == seed && s.layer == layer && s.stat == stat)
            .map(|s| s.value)
    }
}

pub const STAT_MEAN_GATE: &str = "mean_gate";
pub const STAT_HIGH_ACT: &str = "high_act_frac";
pub const STAT_SKIP: &str = "hard_skip_frac";
pub const STAT_JACCARD: &str = "jaccard_0v45";
pub const STAT_JACCARD_SHARED: &str = "jaccard_0v45_shared";

/// Pre-rotated training and test sets for a run.
pub struct ExperimentData {
    pub train: Dataset,
    pub train_0: Dataset,
    pub train_45: Dataset,
    pub test_0: Dataset,
    pub test_45: Dataset,
}

impl ExperimentData {
    pub fn load(dir: &Path, train_limit: Option<usize>) -> Result<Self> {
        let test = load_mnist(dir, Split::Test);
        let train = load_mnist(dir, Split::Train);
        let (train, test) = match (train, test) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(Error::MissingData(mut a)), Err(Error::MissingData(b))) => {
                a.extend(b);
                return Err(Error::MissingData(a));
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        Ok(Self::from_datasets(train, test, train_limit))
    }

    pub fn from_datasets(train: Dataset, test: Dataset, train_limit: Option<usize>) -> Self {
        let train = match train_limit {
            Some(n) => train.take(n),
            None => train,
        };
        Self {
            train_0: make_mode_dataset(&train, Mode::Deg0),
            train_45: make_mode_dataset(&train, Mode::Deg45),
            test_0: make_mode_dataset(&test, Mode::Deg0),
            test_45: make_mode_dataset(&test, Mode::Deg45),
            train,
        }
    }

    /// Shared batch for mask comparison: the first half-batch of each mode.
    pub fn overlap_batch(&self) -> Batch {
        let half = DIAG_BATCH / 2;
        let mut images = self.train_0.take(half).images;
        images.extend(self.train_45.take(half).images);
        Dataset {
            images,
            split: Split::Train,
        }
        .head_batch(DIAG_BATCH)
    }

    pub fn diag_batch(&self, mode: Mode) -> Batch {
        match mode {
            Mode::Deg0 => self.train_0.head_batch(DIAG_BATCH),
            Mode::Deg45 => self.train_45.head_batch(DIAG_BATCH),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub cfg: TrainConfig,
    /// Also specialize a 0° TauGate per seed and record gate-mask overlap.
    pub extras: bool,
    pub gate_mode: GateMode,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            cfg: TrainConfig::default(),
            extras: false,
            gate_mode: GateMode::Soft,
        }
    }
}

fn layer_stats(
    out: &mut Vec<StatRecord>,
    method: Method,
    seed: u64,
    stat: &str,
    per_layer: &[Real],
) {
    for (i, &v) in per_layer.iter().enumerate() {
        out.push(StatRecord {
            method,
            seed,
            layer: (i + 1).to_string(),
            stat: stat.to_string(),
            value: v,
        });
    }
    out.push(StatRecord {
        method,
        seed,
        layer: "avg".into(),
        stat: stat.to_string(),
        value: per_layer.iter().sum::<Real>() / per_layer.len() as Real,
    });
}

/// Foundation for one seed: random init trained on the seed's mode mixture.
pub fn build_foundation(data: &ExperimentData, cfg: &TrainConfig) -> Result<Backbone> {
    let mixture = make_foundation_mixture(&data.train, &mut cfg.rng(streams::MIXTURE));
    let init = Backbone::init(&mut cfg.rng(streams::BACKBONE_INIT));
    train_foundation(init, &mixture, cfg)
}

/// Runs every (seed, method) pair. Within a seed all methods share one
/// foundation; results are ordered by seed, then by `opts.methods`.
pub fn run_matrix(data: &ExperimentData, opts: &RunOptions) -> Result<RunOutput> {
    let mut out = RunOutput::default();
    if opts.methods.is_empty() {
        return Ok(out);
    }
    let diag_45 = data.diag_batch(Mode::Deg45);
    let diag_0 = data.diag_batch(Mode::Deg0);
    let shared = data.overlap_batch();
    for &seed in &opts.seeds {
        let cfg = TrainConfig {
            seed,
            ..opts.cfg.clone()
        };
        let bb = build_foundation(data, &cfg)?;
        let checksum = bb.checksum();
        let frozen_bytes = bb.to_le_bytes();

        let mut taugate_45 = None;
        for &method in &opts.methods {
            let started = Instant::now();
            let sp = specialize(
                &bb,
                method,
                &data.train_45,
                &cfg,
                &mut cfg.rng(streams::ADAPTER_INIT),
            )?;
            if bb.to_le_bytes() != frozen_bytes {
                return Err(Error::Usage(format!("{method} modified the frozen backbone")));
            }
            let ad = sp.adapter;
            let acc_0deg = evaluate(&bb, &ad, &data.test_0, opts.gate_mode)?;
            let acc_45deg = evaluate(&bb, &ad, &data.test_45, opts.gate_mode)?;
            let mut high = None;
            if ad.is_gated() {
                let gs = high_act_fraction(&bb, &ad, &diag_45)?;
                high = Some(gs.avg_high_act_frac);
                layer_stats(&mut out.stats, method, seed, STAT_MEAN_GATE, &gs.mean_gate);
                layer_stats(&mut out.stats, method, seed, STAT_HIGH_ACT, &gs.high_act_frac);
                let skip = hard_gate_skip_fraction(&bb, &ad, &diag_45)?;
                out.stats.push(StatRecord {
                    method,
                    seed,
                    layer: "avg".into(),
                    stat: STAT_SKIP.into(),
                    value: skip,
                });
            }
            out.records.push(RunRecord {
                method,
                seed,
                trainable_params: count_trainable(&ad),
                acc_0deg,
                acc_45deg,
                high_act_frac: high,
                wall_seconds: started.elapsed().as_secs_f64(),
                foundation_checksum: checksum.clone(),
            });
            if method == Method::TauGate {
                taugate_45 = Some(ad);
            }
        }

        if opts.extras {
            if let Some(ad45) = &taugate_45 {
                let ad0 = specialize(
                    &bb,
                    Method::TauGate,
                    &data.train_0,
                    &cfg,
                    &mut cfg.rng(streams::ADAPTER_INIT),
                )?
                .adapter;
                // Each model on its own mode: the subnetworks actually executed.
                let m0 = gate_mask(&bb, &ad0, &diag_0, HIGH_ACT_THRESHOLD)?;
                let m45 = gate_mask(&bb, ad45, &diag_45, HIGH_ACT_THRESHOLD)?;
                let ov = jaccard_overlap(&m0, &m45)?;
                layer_stats(&mut out.stats, Method::TauGate, seed, STAT_JACCARD, &ov.per_layer);
                // Both models on one batch: isolates the parameter change.
                let s0 = gate_mask(&bb, &ad0, &shared, HIGH_ACT_THRESHOLD)?;
                let s45 = gate_mask(&bb, ad45, &shared, HIGH_ACT_THRESHOLD)?;
                let ov = jaccard_overlap(&s0, &s45)?;
                layer_stats(&mut out.stats, Method::TauGate, seed, STAT_JACCARD_SHARED, &ov.per_layer);
            }
        }
    }
    Ok(out)
}

const CSV_HEADER: [&str; 11] = [
    "kind",
    "method",
    "seed",
    "trainable_params",
    "acc_0deg",
    "acc_45deg",
    "high_act_frac",
    "foundation_checksum",
    "layer",
    "stat",
    "value",
];

pub fn write_results_csv(out: &RunOutput) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in &out.records {
        w.write_record([
            "run".to_string(),
            r.method.name().to_string(),
            r.seed.to_string(),
            r.trainable_params.to_string(),
            r.acc_0deg.to_string(),
            r.acc_45deg.to_string(),
            r.high_act_frac.map(|v| v.to_string()).unwrap_or_default(),
            r.foundation_checksum.clone(),
            String::new(),
            String::new(),
            String::new(),
        ])?;
    }
    for s in &out.stats {
        w.write_record([
            "stat".to_string(),
            s.method.name().to_string(),
            s.seed.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            s.layer.clone(),
            s.stat.clone(),
            s.value.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_timings_csv(out: &RunOutput) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "seed", "wall_seconds"])?;
    for r in &out.records {
        w.write_record([r.method.name(), &r.seed.to_string(), &format!("{:.3}", r.wall_seconds)])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize) -> Result<T> {
    let raw = rec.get(idx).unwrap_or("");
    raw.parse()
        .map_err(|_| Error::Config(format!("results.csv: bad {} value {raw:?}", CSV_HEADER[idx])))
}

pub fn read_results_csv(bytes: &[u8]) -> Result<RunOutput> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Config("results.csv: unexpected header".into()));
    }
    let mut out = RunOutput::default();
    for rec in rdr.records() {
        let rec = rec?;
        let method: Method = parse_field::<String>(&rec, 1)?.parse()?;
        let seed = parse_field(&rec, 2)?;
        match rec.get(0) {
            Some("run") => {
                let high = rec.get(6).unwrap_or("");
                out.records.push(RunRecord {
                    method,
                    seed,
                    trainable_params: parse_field(&rec, 3)?,
                    acc_0deg: parse_field(&rec, 4)?,
                    acc_45deg: parse_field(&rec, 5)?,
                    high_act_frac: if high.is_empty() {
                        None
                    } else {
                        Some(parse_field(&rec, 6)?)
                    },
                    wall_seconds: 0.0,
                    foundation_checksum: rec.get(7).unwrap_or("").to_string(),
                });
            }
            Some("stat") => out.stats.push(StatRecord {
                method,
                seed,
                layer: rec.get(8).unwrap_or("").to_string(),
                stat: rec.get(9).unwrap_or("").to_string(),
                value: parse_field(&rec, 10)?,
            }),
            other => {
                return Err(Error::Config(format!("results.csv: unknown row kind {other:?}")))
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub method: Method,
    pub trainable_params: usize,
    pub seeds: usize,
    pub acc_0deg_mean: Real,
    pub acc_0deg_std: Real,
    pub acc_45deg_mean: Real,
    pub acc_45deg_std: Real,
    pub high_act_frac_mean: Option<Real>,
}

/// Mean and sample (n−1) standard deviation; a single value has std 0.
pub fn mean_std(values: &[Real]) -> (Real, Real) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<Real>() / n as Real;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<Real>() / (n - 1) as Real;
    (mean, var.sqrt())
}

/// One row per method, sorted by trainable parameter count (ties keep
/// [`Method::ALL`] order).
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut by_method: BTreeMap<usize, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = Method::ALL.iter().position(|&m| m == r.method).unwrap();
        by_method.entry(key).or_default().push(r);
    }
    let mut rows: Vec<AggregateRow> = by_method
        .into_values()
        .map(|rs| {
            let acc0: Vec<Real> = rs.iter().map(|r| r.acc_0deg).collect();
            let acc45: Vec<Real> = rs.iter().map(|r| r.acc_45deg).collect();
            let high: Vec<Real> = rs.iter().filter_map(|r| r.high_act_frac).collect();
            let (m0, s0) = mean_std(&acc0);
            let (m45, s45) = mean_std(&acc45);
            AggregateRow {
                method: rs[0].method,
                trainable_params: rs[0].trainable_params,
                seeds: rs.len(),
                acc_0deg_mean: m0,
                acc_0deg_std: s0,
                acc_45deg_mean: m45,
                acc_45deg_std: s45,
                high_act_frac_mean: (!high.is_empty()).then(|| mean_std(&high).0),
            }
        })
        .collect();
    rows.sort_by_key(|r| r.trainable_params);
    rows
}

pub fn method_label(row: &AggregateRow) -> String {
    match row.method {
        Method::Frozen => "Frozen (no adapt)".into(),
        Method::FullFt => "Full FT".into(),
        Method::BitFit => "BitFit (bias-only)".into(),
        Method::GainOnly => "GainOnly (activation scales)".into(),
        Method::TauOnly => "TauOnly (thresholds)".into(),
        Method::TauGate => "TauGate (threshold tuning)".into(),
        // Each rank unit costs (784+128) + (128+128) + (128+10) parameters.
        Method::Lora => format!("LoRA (r={})", row.trainable_params / 1306),
    }
}

fn pm(mean: Real, std: Real) -> String {
    format!("{mean:.3} $\\pm$ {std:.3}")
}

fn select<'a>(rows: &'a [AggregateRow], order: &[Method]) -> Vec<&'a AggregateRow> {
    order
        .iter()
        .filter_map(|m| rows.iter().find(|r| r.method == *m))
        .collect()
}

fn table(caption: &str, label: &str, spec: &str, header: &str, body: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "\\begin{{table}}[t]");
    let _ = writeln!(s, "\\centering");
    let _ = writeln!(s, "\\caption{{{caption}}}");
    let _ = writeln!(s, "\\label{{{label}}}");
    let _ = writeln!(s, "\\begin{{tabular}}{{{spec}}}");
    let _ = writeln!(s, "\\toprule");
    let _ = writeln!(s, "{header} \\\\");
    let _ = writeln!(s, "\\midrule");
    for line in body {
        let _ = writeln!(s, "{line} \\\\");
    }
    let _ = writeln!(s, "\\bottomrule");
    let _ = writeln!(s, "\\end{{tabular}}");
    let _ = writeln!(s, "\\end{{table}}");
    s
}

/// Main comparison table: Frozen, BitFit, TauGate, LoRA, Full FT.
pub fn emit_latex_main(rows: &[AggregateRow]) -> String {
    let body: Vec<String> = select(rows, &MAIN_METHODS)
        .into_iter()
        .map(|r| {
            let high = match (r.method.is_gated(), r.high_act_frac_mean) {
                (true, Some(h)) => format!("{h:.2}"),
                _ => "--".into(),
            };
            format!(
                "{} & {} & {} & {} & {}",
                method_label(r),
                r.trainable_params,
                pm(r.acc_0deg_mean, r.acc_0deg_std),
                pm(r.acc_45deg_mean, r.acc_45deg_std),
                high
            )
        })
        .collect();
    table(
        "Mode specialization on MNIST (0$^\\circ$) vs rotated MNIST (45$^\\circ$): foundation pretrained on a 50/50 mixture, then specialized to the rotated mode.",
        "tab:mnist-rotation",
        "lrrrr",
        "Method & Trainable params & Acc (0$^\\circ$) & Acc (45$^\\circ$) & High-act frac",
        &body,
    )
}

pub fn emit_latex_ablations(rows: &[AggregateRow]) -> String {
    let body: Vec<String> = select(rows, &ABLATION_METHODS)
        .into_iter()
        .map(|r| {
            format!(
                "{} & {} & {} & {}",
                method_label(r),
                r.trainable_params,
                pm(r.acc_0deg_mean, r.acc_0deg_std),
                pm(r.acc_45deg_mean, r.acc_45deg_std)
            )
        })
        .collect();
    table(
        "Ablations on activation-space adaptation components (mean $\\pm$ std over seeds).",
        "tab:mnist-ablations",
        "lrrr",
        "Method & Trainable params & Acc (0$^\\circ$) & Acc (45$^\\circ$)",
        &body,
    )
}

/// Per-layer mean ± std of the per-seed overlaps; rows Hidden 1, Hidden 2, Average.
pub fn emit_latex_overlap(overlaps: &[MaskOverlap]) -> String {
    let layers = overlaps.first().map_or(0, |o| o.per_layer.len());
    let mut body = Vec::new();
    for l in 0..layers {
        let v: Vec<Real> = overlaps.iter().map(|o| o.per_layer[l]).collect();
        let (m, s) = mean_std(&v);
        body.push(format!("Hidden {} & {}", l + 1, pm(m, s)));
    }
    if !overlaps.is_empty() {
        let v: Vec<Real> = overlaps.iter().map(|o| o.average).collect();
        let (m, s) = mean_std(&v);
        body.push(format!("Average & {}", pm(m, s)));
    }
    table(
        "Gate-mask similarity between 0$^\\circ$- and 45$^\\circ$-specialized TauGate models (Jaccard over units with mean gate $>0.9$; mean $\\pm$ std over seeds).",
        "tab:taugate-overlap",
        "lr",
        "Layer & Jaccard",
        &body,
    )
}

/// Grouped bar chart of both accuracies per method with ±std whiskers.
/// Bar height is `accuracy × PLOT_HEIGHT` on a 0–1 axis.
pub fn emit_svg_accuracy(rows: &[AggregateRow]) -> String {
    const PLOT_HEIGHT: Real = 300.0;
    const LEFT: Real = 60.0;
    const TOP: Real = 30.0;
    const GROUP: Real = 110.0;
    const BAR: Real = 36.0;
    let width = LEFT + GROUP * rows.len().max(1) as Real + 150.0;
    let height = TOP + PLOT_HEIGHT + 70.0;
    let base = TOP + PLOT_HEIGHT;
    let colors = ["#4c72b0", "#dd8452"];

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{width:.0}" height="{height:.0}" fill="white"/>"#);
    for tick in 0..=5 {
        let v = tick as Real * 0.2;
        let y = base - v * PLOT_HEIGHT;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            width - 140.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" transform="rotate(-90 16 {:.2})" text-anchor="middle">Test accuracy</text>"#,
        base - PLOT_HEIGHT / 2.0,
        base - PLOT_HEIGHT / 2.0
    );
    for (i, r) in rows.iter().enumerate() {
        let gx = LEFT + 15.0 + GROUP * i as Real;
        let bars = [
            ("0deg", r.acc_0deg_mean, r.acc_0deg_std),
            ("45deg", r.acc_45deg_mean, r.acc_45deg_std),
        ];
        for (k, (mode, mean, std)) in bars.into_iter().enumerate() {
            let x = gx + k as Real * (BAR + 4.0);
            let h = mean * PLOT_HEIGHT;
            let _ = writeln!(
                s,
                r#"<rect class="bar" data-method="{}" data-mode="{mode}" x="{x:.2}" y="{:.2}" width="{BAR:.2}" height="{h:.2}" fill="{}"/>"#,
                r.method.name(),
                base - h,
                colors[k]
            );
            let cx = x + BAR / 2.0;
            let lo = base - (mean - std).max(0.0) * PLOT_HEIGHT;
            let hi = base - (mean + std).min(1.0) * PLOT_HEIGHT;
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.2}" y1="{lo:.2}" x2="{cx:.2}" y2="{hi:.2}" stroke="black"/>"#
            );
            for y in [lo, hi] {
                let _ = writeln!(
                    s,
                    r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black"/>"#,
                    cx - 5.0,
                    cx + 5.0
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            gx + BAR + 2.0,
            base + 18.0,
            method_label(r).replace('&', "&amp;")
        );
    }
    let lx = width - 130.0;
    for (k, name) in ["MNIST 0°", "MNIST 45°"].iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * k as Real;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.2}" y="{y:.2}" width="12" height="12" fill="{}"/>"#,
            colors[k]
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{name}</text>"#, lx + 18.0, y + 10.0);
    }
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT:.2}" y1="{base:.2}" x2="{:.2}" y2="{base:.2}" stroke="black"/>"#,
        width - 140.0
    );
    s.push_str("</svg>\n");
    s
}

/// Output locations under a root directory.
pub struct ArtifactPaths {
    pub results_csv: PathBuf,
    pub timings_csv: PathBuf,
    pub main_table: PathBuf,
    pub ablation_table: PathBuf,
    pub overlap_table: PathBuf,
    pub figure: PathBuf,
}

impl ArtifactPaths {
    pub fn under(root: &Path) -> Self {
        Self {
            results_csv: root.join("out/results.csv"),
            timings_csv: root.join("out/timings.csv"),
            main_table: root.join("tables/mnist_rotation_results.tex"),
            ablation_table: root.join("tables/mnist_rotation_ablations.tex"),
            overlap_table: root.join("tables/taugate_overlap.tex"),
            figure: root.join("figures/mnist_rotation_accuracy.svg"),
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(path)?.write_all(bytes)?;
    Ok(())
}

/// Writes tables and figure derived from `out`. The ablation and overlap
/// tables are written only when their rows are present.
pub fn write_reports(out: &RunOutput, paths: &ArtifactPaths) -> Result<Vec<PathBuf>> {
    let rows = aggregate(&out.records);
    let mut written = vec![paths.main_table.clone(), paths.figure.clone()];
    write_file(&paths.main_table, emit_latex_main(&rows).as_bytes())?;
    let fig_rows: Vec<AggregateRow> = select(&rows, &MAIN_METHODS).into_iter().cloned().collect();
    write_file(&paths.figure, emit_svg_accuracy(&fig_rows).as_bytes())?;
    if rows
        .iter()
        .any(|r| matches!(r.method, Method::GainOnly | Method::TauOnly))
    {
        write_file(&paths.ablation_table, emit_latex_ablations(&rows).as_bytes())?;
        written.push(paths.ablation_table.clone());
    }
    let overlaps = out.overlaps();
    if !overlaps.is_empty() {
        write_file(&paths.overlap_table, emit_latex_overlap(&overlaps).as_bytes())?;
        written.push(paths.overlap_table.clone());
    }
    Ok(written)
}

pub fn write_run(out: &RunOutput, paths: &ArtifactPaths) -> Result<()> {
    write_file(&paths.results_csv, &write_results_csv(out)?)?;
    write_file(&paths.timings_csv, &write_timings_csv(out)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use regex::Regex;

    fn rec(method: Method, seed: u64, a0: Real, a45: Real) -> RunRecord {
        let params = match method {
            Method::Frozen => 0,
            Method::BitFit => 266,
            Method::GainOnly | Method::TauOnly => 256,
            Method::TauGate => 512,
            Method::Lora => 10448,
            Method::FullFt => 118282,
        };
        RunRecord {
            method,
            seed,
            trainable_params: params,
            acc_0deg: a0,
            acc_45deg: a45,
            high_act_frac: method.is_gated().then_some(0.28),
            wall_seconds: 1.0,
            foundation_checksum: "abc".into(),
        }
    }

    fn sample() -> RunOutput {
        let mut out = RunOutput::default();
        for seed in 0..3u64 {
            for (i, m) in Method::ALL.into_iter().enumerate() {
                let d = 0.01 * seed as Real;
                out.records.push(rec(m, seed, 0.8 + 0.01 * i as Real + d, 0.81 + d));
            }
            layer_stats(&mut out.stats, Method::TauGate, seed, STAT_JACCARD, &[1.0, 0.5 + 0.25 * seed as Real]);
        }
        out
    }

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[0.8, 0.9]);
        assert!((m - 0.85).abs() < 1e-12);
        assert!((s - 0.070_710_678).abs() < 1e-8);
        assert_eq!(mean_std(&[0.5, 0.5, 0.5]).1, 0.0);
    }

    #[test]
    fn aggregate_sorted_by_params() {
        let rows = aggregate(&sample().records);
        let params: Vec<usize> = rows.iter().map(|r| r.trainable_params).collect();
        assert_eq!(params, vec![0, 256, 256, 266, 512, 10448, 118282]);
        assert!(rows.iter().all(|r| r.seeds == 3));
        assert_eq!(rows[0].method, Method::Frozen);
        assert!(rows[0].high_act_frac_mean.is_none());
    }

    #[test]
    fn main_table_shape() {
        let rows = aggregate(&sample().records);
        let tex = emit_latex_main(&rows);
        let frozen = Regex::new(r"(?m)^Frozen \(no adapt\) & 0 & \d\.\d{3} \$\\pm\$ \d\.\d{3} & \d\.\d{3} \$\\pm\$ \d\.\d{3} & -- \\\\$").unwrap();
        assert!(frozen.is_match(&tex), "{tex}");
        assert!(tex.contains("LoRA (r=8) & 10448"));
        assert!(tex.contains("& 0.28 \\\\"));
        let order: Vec<usize> = ["Frozen", "BitFit", "TauGate", "LoRA", "Full FT"]
            .iter()
            .map(|k| tex.find(k).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
        assert!(!tex.contains("GainOnly"));
    }

    #[test]
    fn main_table_numbers_parse_back() {
        let rows = aggregate(&sample().records);
        let tex = emit_latex_main(&rows);
        let cell = Regex::new(r"(\d\.\d{3}) \$\\pm\$ (\d\.\d{3})").unwrap();
        let parsed: Vec<Real> = cell
            .captures_iter(&tex)
            .flat_map(|c| [c[1].parse::<Real>().unwrap(), c[2].parse().unwrap()])
            .collect();
        let expect: Vec<Real> = select(&rows, &MAIN_METHODS)
            .iter()
            .flat_map(|r| [r.acc_0deg_mean, r.acc_0deg_std, r.acc_45deg_mean, r.acc_45deg_std])
            .map(|v| (v * 1000.0).round() / 1000.0)
            .collect();
        assert_eq!(parsed.len(), expect.len());
        for (p, e) in parsed.iter().zip(&expect) {
            assert!((p - e).abs() < 1e-9, "{p} vs {e}");
        }
    }

    #[test]
    fn empty_tables_have_frame_only() {
        let tex = emit_latex_main(&[]);
        assert!(tex.contains("\\toprule") && tex.contains("\\bottomrule"));
        assert_eq!(tex.matches("\\\\").count(), 1, "header line only");
    }

    #[test]
    fn ablation_order_and_format() {
        let tex = emit_latex_ablations(&aggregate(&sample().records));
        let names = ["Frozen", "GainOnly", "TauOnly", "TauGate", "BitFit", "LoRA"];
        let pos: Vec<usize> = names.iter().map(|n| tex.find(n).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(!tex.contains("Full FT"));
        let row = Regex::new(r"(?m)^[A-Za-z]+.* & \d+ & \d\.\d{3} \$\\pm\$ \d\.\d{3} & \d\.\d{3} \$\\pm\$ \d\.\d{3} \\\\$").unwrap();
        assert_eq!(row.find_iter(&tex).count(), 6);
    }

    #[test]
    fn overlap_table_rows() {
        let same = MaskOverlap {
            per_layer: vec![1.0, 1.0],
            average: 1.0,
        };
        let tex = emit_latex_overlap(&[same.clone(), same]);
        assert!(tex.contains("Hidden 1 & 1.000 $\\pm$ 0.000 \\\\"));
        assert!(tex.contains("Hidden 2 & 1.000 $\\pm$ 0.000 \\\\"));
        assert!(tex.contains("Average & 1.000 $\\pm$ 0.000 \\\\"));

        let tex = emit_latex_overlap(&sample().overlaps());
        assert!(tex.contains("Hidden 2 & 0.750 $\\pm$ 0.250"), "{tex}");
    }

    #[test]
    fn csv_roundtrip_regenerates_tables() {
        let out = sample();
        let bytes = write_results_csv(&out).unwrap();
        let back = read_results_csv(&bytes).unwrap();
        assert_eq!(back.stats, out.stats);
        assert_eq!(
            emit_latex_main(&aggregate(&back.records)),
            emit_latex_main(&aggregate(&out.records))
        );
        assert_eq!(write_results_csv(&back).unwrap(), bytes);
        assert!(std::str::from_utf8(&bytes).unwrap().starts_with("kind,method,seed,"));
    }

    #[test]
    fn svg_bars_proportional() {
        let rows = aggregate(&sample().records);
        let svg = emit_svg_accuracy(&rows);
        assert!(svg.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\""));
        assert!(svg.trim_end().ends_with("</svg>"));
        let re = Regex::new(r#"<rect class="bar" data-method="(\w+)" data-mode="(\w+)" x="[\d.]+" y="[\d.]+" width="[\d.]+" height="([\d.]+)""#).unwrap();
        let bars: Vec<(String, String, Real)> = re
            .captures_iter(&svg)
            .map(|c| (c[1].to_string(), c[2].to_string(), c[3].parse().unwrap()))
            .collect();
        assert_eq!(bars.len(), 2 * rows.len());
        for (method, mode, h) in &bars {
            let row = rows.iter().find(|r| r.method.name() == method).unwrap();
            let acc = if mode == "0deg" { row.acc_0deg_mean } else { row.acc_45deg_mean };
            assert!((h / acc - 300.0).abs() < 0.02, "{method} {mode}");
        }
        assert_eq!(svg, emit_svg_accuracy(&rows));
        assert_eq!(
            re.find_iter(&emit_svg_accuracy(&rows[..1])).count(),
            2
        );
    }
}
