//! Curve metrics (max, MAVP), percent-change tables, the confidence versus
//! Eloss anomaly comparison, and static SVG plots.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::{inject_noise, DatasetHandle, NoiseSpec, Split};
use crate::eloss::eloss_metric;
use crate::entropy::EntropyConfig;
use crate::error::{Error, Result};
use crate::net::{per_sample_profiles, ModelConfig, RepeatedBlockNet};
use crate::tape::softmax_rows;
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    points: Vec<(usize, f64)>,
}

impl Curve {
    pub fn new(points: Vec<(usize, f64)>) -> Result<Self> {
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Contract("curve steps must be strictly increasing".into()));
        }
        if let Some((s, v)) = points.iter().find(|p| !p.1.is_finite()) {
            return Err(Error::Contract(format!("non-finite value {v} at step {s}")));
        }
        Ok(Self { points })
    }

    /// Values at steps 1, 2, ….
    pub fn from_values(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().enumerate().map(|(i, &v)| (i + 1, v)).collect())
    }

    pub fn points(&self) -> &[(usize, f64)] {
        &self.points
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `step,value` with a header row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["step", "value"])?;
        for (s, v) in &self.points {
            wtr.write_record([s.to_string(), v.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn abs_steps(curve: &Curve) -> Result<Vec<f64>> {
    if curve.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "MAVP needs at least 2 points, got {}",
            curve.len()
        )));
    }
    Ok(curve.points.windows(2).map(|w| w[1].1.abs() - w[0].1.abs()).collect())
}

/// `(1/N)·Σ (|x_{k+1}| − |x_k|)` over the N consecutive pairs. Telescopes to
/// `(|x_last| − |x_first|)/N`.
pub fn mavp_literal(curve: &Curve) -> Result<f64> {
    let d = abs_steps(curve)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// `(1/N)·Σ ||x_{k+1}| − |x_k||`, a volatility measure.
pub fn mavp_abs(curve: &Curve) -> Result<f64> {
    let d = abs_steps(curve)?;
    Ok(d.iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64)
}

pub fn max_metric(curve: &Curve) -> Result<f64> {
    curve
        .values()
        .reduce(f64::max)
        .ok_or_else(|| Error::InsufficientData("empty curve".into()))
}

/// `100·(noisy − clean)/clean`.
pub fn percent_change(clean_mean: f64, noisy_mean: f64) -> Result<f64> {
    if clean_mean == 0.0 {
        return Err(Error::UndefinedBaseline);
    }
    Ok(100.0 * (noisy_mean - clean_mean) / clean_mean)
}

/// Per-sample maximum softmax probability of `logits [B, K]`.
pub fn max_probabilities(logits: &Tensor) -> Result<Vec<f64>> {
    if logits.shape.len() != 2 || logits.shape[1] < 2 || logits.shape[0] == 0 {
        return Err(Error::UnsupportedTask(format!(
            "confidence needs classifier logits [B, K>=2], got {:?}",
            logits.shape
        )));
    }
    let k = logits.shape[1];
    let probs = softmax_rows(&logits.values, k);
    Ok(probs.chunks(k).map(|r| r.iter().copied().fold(0.0, f64::max)).collect())
}

/// Batch mean of the maximum class probability.
pub fn confidence_from_logits(logits: &Tensor) -> Result<f64> {
    let p = max_probabilities(logits)?;
    Ok(p.iter().sum::<f64>() / p.len() as f64)
}

pub fn confidence(net: &RepeatedBlockNet, input: &Tensor) -> Result<f64> {
    let (logits, _) = net.forward_with_coverage(input, 0)?;
    confidence_from_logits(&logits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRow {
    pub condition: String,
    pub noise: Option<NoiseSpec>,
    pub mean_confidence: f64,
    pub mean_eloss_metric: f64,
    /// `None` when the clean mean is 0.
    pub pct_change_confidence: Option<f64>,
    pub pct_change_eloss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub model: Option<ModelConfig>,
    pub dataset: Option<DatasetHandle>,
    pub k: usize,
    pub epsilon: f64,
    /// Taps used for the metric: the block input plus every block output.
    pub coverage: usize,
    pub rows: Vec<AnomalyRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| x.to_string())
}

impl AnomalyReport {
    pub fn row(&self, condition: &str) -> Option<&AnomalyRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    /// `condition,mean_confidence,mean_eloss,pct_conf,pct_eloss`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["condition", "mean_confidence", "mean_eloss", "pct_conf", "pct_eloss"])?;
        for r in &self.rows {
            wtr.write_record([
                r.condition.clone(),
                r.mean_confidence.to_string(),
                r.mean_eloss_metric.to_string(),
                fmt_opt(r.pct_change_confidence),
                fmt_opt(r.pct_change_eloss),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Mean confidence and mean Eloss metric over a split.
pub fn condition_means(
    net: &RepeatedBlockNet,
    inputs: &Tensor,
    k: usize,
    config: &EntropyConfig,
) -> Result<(f64, f64)> {
    let n = *inputs.shape.first().unwrap_or(&0);
    if n == 0 {
        return Err(Error::InsufficientData("empty evaluation split".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let (mut conf, mut metric) = (0.0, 0.0);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (logits, taps) = net.forward_with_coverage(&inputs.gather_rows(chunk)?, net.block_count())?;
        conf += max_probabilities(&logits)?.iter().sum::<f64>();
        metric += per_sample_profiles(&taps, k, config)?.iter().map(eloss_metric).sum::<f64>();
    }
    Ok((conf / n as f64, metric / n as f64))
}

/// Evaluates `split` clean and under each noise spec. Percent changes are
/// relative to the clean row.
pub fn anomaly_report(
    net: &RepeatedBlockNet,
    split: &Split,
    dataset: Option<&DatasetHandle>,
    noise: &[NoiseSpec],
    k: usize,
    config: &EntropyConfig,
) -> Result<AnomalyReport> {
    if noise.is_empty() {
        return Err(Error::Config("anomaly report needs at least one noise spec".into()));
    }
    if net.block_count() == 0 {
        return Err(Error::InsufficientTaps(0));
    }
    let (c0, m0) = condition_means(net, &split.inputs, k, config)?;
    let pct = |clean: f64, v: f64| percent_change(clean, v).ok();
    let mut rows = vec![AnomalyRow {
        condition: "clean".into(),
        noise: None,
        mean_confidence: c0,
        mean_eloss_metric: m0,
        pct_change_confidence: pct(c0, c0),
        pct_change_eloss: pct(m0, m0),
    }];
    for spec in noise {
        spec.validate()?;
        let noisy = inject_noise(&split.inputs, spec)?;
        let (c, m) = condition_means(net, &noisy, k, config)?;
        rows.push(AnomalyRow {
            condition: spec.label(),
            noise: Some(*spec),
            mean_confidence: c,
            mean_eloss_metric: m,
            pct_change_confidence: pct(c0, c),
            pct_change_eloss: pct(m0, m),
        });
    }
    Ok(AnomalyReport {
        model: net.model.clone(),
        dataset: dataset.cloned(),
        k,
        epsilon: config.epsilon,
        coverage: net.block_count(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub run: String,
    pub max: f64,
    pub mavp_abs: f64,
    pub mavp_literal: f64,
}

pub fn summarize(run: &str, curve: &Curve) -> Result<CurveSummary> {
    Ok(CurveSummary {
        run: run.into(),
        max: max_metric(curve)?,
        mavp_abs: mavp_abs(curve)?,
        mavp_literal: mavp_literal(curve)?,
    })
}

/// Max/MAVP per run. With exactly two runs a `Delta` row (second − first)
/// is appended.
pub fn curves_table(runs: &[(String, Curve)]) -> Result<Vec<CurveSummary>> {
    let mut rows = runs.iter().map(|(n, c)| summarize(n, c)).collect::<Result<Vec<_>>>()?;
    if let [a, b] = rows.as_slice() {
        let delta = CurveSummary {
            run: "Delta".into(),
            max: b.max - a.max,
            mavp_abs: b.mavp_abs - a.mavp_abs,
            mavp_literal: b.mavp_literal - a.mavp_literal,
        };
        rows.push(delta);
    }
    Ok(rows)
}

pub fn write_curves_table<W: Write>(rows: &[CurveSummary], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["run", "max", "mavp_abs", "mavp_literal"])?;
    for r in rows {
        wtr.write_record([
            r.run.clone(),
            r.max.to_string(),
            r.mavp_abs.to_string(),
            r.mavp_literal.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub coverage: usize,
    pub max: f64,
    pub mavp_abs: f64,
    pub ms_per_step: Option<f64>,
}

/// Rows ordered by coverage, then by run name.
pub fn sweep_table(mut rows: Vec<SweepRow>) -> Vec<SweepRow> {
    rows.sort_by(|a, b| a.coverage.cmp(&b.coverage).then_with(|| a.run.cmp(&b.run)));
    rows
}

pub fn write_sweep_table<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["run", "coverage", "max", "mavp_abs", "ms_per_step"])?;
    for r in rows {
        wtr.write_record([
            r.run.clone(),
            r.coverage.to_string(),
            r.max.to_string(),
            r.mavp_abs.to_string(),
            fmt_opt(r.ms_per_step),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A static line plot of one or more curves.
pub fn curves_svg(title: &str, series: &[(String, Curve)]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let pts = series.iter().flat_map(|(_, c)| c.points().iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(s, v) in pts {
        x0 = x0.min(s as f64);
        x1 = x1.max(s as f64);
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<path d="M{m} {m} V{b} H{r}" stroke="black" fill="none"/>"#,
        b = h - m,
        r = w - m
    );
    for (v, y) in [(y0, h - m), (y1, m)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.4}</text>"#,
            m - 4.0,
            y + 4.0
        );
    }
    for (v, x) in [(x0, m), (x1, w - m)] {
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{v}</text>"#,
            h - m + 16.0
        );
    }
    for (i, (name, curve)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> =
            curve.points().iter().map(|&(s, v)| format!("{:.2},{:.2}", sx(s as f64), sy(v))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#,
            path.join(" ")
        );
        let ly = m + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            w - m - 150.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_dataset_with, NoiseKind, SplitSizes, BLOBS_MLP};

    fn c(v: &[f64]) -> Curve {
        Curve::from_values(v).unwrap()
    }

    #[test]
    fn mavp_examples() {
        assert_eq!(mavp_literal(&c(&[1.0, 2.0, 4.0])).unwrap(), 1.5);
        assert_eq!(mavp_literal(&c(&[3.0, 3.0, 3.0])).unwrap(), 0.0);
        assert_eq!(mavp_literal(&c(&[-1.0, -4.0])).unwrap(), 3.0);
        assert_eq!(mavp_abs(&c(&[1.0, 3.0, 2.0])).unwrap(), 1.5);
        assert_eq!(mavp_abs(&c(&[0.5, 0.5])).unwrap(), 0.0);
        let mono = c(&[0.1, 0.4, 0.45, 0.9]);
        assert_eq!(mavp_abs(&mono).unwrap(), mavp_literal(&mono).unwrap());
        assert!(matches!(mavp_abs(&c(&[1.0])), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn max_examples() {
        assert_eq!(max_metric(&c(&[0.1, 0.9, 0.5])).unwrap(), 0.9);
        assert_eq!(max_metric(&c(&[0.3])).unwrap(), 0.3);
        assert_eq!(max_metric(&c(&[0.7, 0.7])).unwrap(), 0.7);
        assert!(max_metric(&c(&[])).is_err());
    }

    #[test]
    fn curve_validation() {
        assert!(Curve::new(vec![(1, 0.0), (1, 1.0)]).is_err());
        assert!(Curve::new(vec![(1, f64::NAN)]).is_err());
        assert!(Curve::new(vec![(2, 0.0), (5, 1.0)]).is_ok());
    }

    #[test]
    fn percent_change_examples() {
        let p = percent_change(0.495, 0.248).unwrap();
        assert_eq!(format!("{p:.1}"), "-49.9");
        let p = percent_change(1.584e-3, 9.085e-3).unwrap();
        assert_eq!(format!("{p:.1}"), "473.5");
        assert_eq!(percent_change(0.3, 0.3).unwrap(), 0.0);
        assert!(matches!(percent_change(0.0, 1.0), Err(Error::UndefinedBaseline)));
    }

    #[test]
    fn confidence_of_logits() {
        let uniform = Tensor::new(vec![2, 10], vec![0.3; 20]).unwrap();
        assert!((confidence_from_logits(&uniform).unwrap() - 0.1).abs() < 1e-15);
        let peaked = Tensor::new(vec![1, 3], vec![50.0, 0.0, 0.0]).unwrap();
        assert!(confidence_from_logits(&peaked).unwrap() > 0.999_999);
        let mixed = Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let per = max_probabilities(&mixed).unwrap();
        assert_eq!(confidence_from_logits(&mixed).unwrap(), (per[0] + per[1]) / 2.0);
        let regression = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(confidence_from_logits(&regression), Err(Error::UnsupportedTask(_))));
    }

    #[test]
    fn delta_row_only_for_pairs() {
        let one = curves_table(&[("a".into(), c(&[0.1, 0.5]))]).unwrap();
        assert_eq!(one.len(), 1);
        let two = curves_table(&[("a".into(), c(&[0.1, 0.5])), ("b".into(), c(&[0.2, 0.4]))]).unwrap();
        assert_eq!(two[2].run, "Delta");
        assert_eq!(two[2].max, two[1].max - two[0].max);
    }

    #[test]
    fn anomaly_report_columns() {
        let data = make_dataset_with(
            BLOBS_MLP,
            5,
            SplitSizes { train: Some(8), val: Some(8), test: Some(40) },
        )
        .unwrap();
        let net = RepeatedBlockNet::from_config(&ModelConfig::mlp(32, 4), 5).unwrap();
        let zero = NoiseSpec { kind: NoiseKind::GaussianAdditive, ratio: 0.0, sigma: 0.5, seed: 9 };
        let cfg = EntropyConfig::default();
        let report = anomaly_report(
            &net,
            &data.test,
            Some(&data.handle),
            &[zero, NoiseSpec::noise1(), NoiseSpec::noise2()],
            1,
            &cfg,
        )
        .unwrap();
        let clean = &report.rows[0];
        assert_eq!(clean.pct_change_confidence, Some(0.0));
        assert_eq!(clean.pct_change_eloss, Some(0.0));
        let z = &report.rows[1];
        assert!((z.mean_confidence - clean.mean_confidence).abs() < 1e-12);
        assert!((z.mean_eloss_metric - clean.mean_eloss_metric).abs() < 1e-12);
        for r in &report.rows {
            let pc = percent_change(clean.mean_confidence, r.mean_confidence).unwrap();
            assert_eq!(r.pct_change_confidence, Some(pc));
        }
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("condition,mean_confidence,mean_eloss,pct_conf,pct_eloss\nclean,"));
        assert!(anomaly_report(&net, &data.test, None, &[], 1, &cfg).is_err());
    }

    #[test]
    fn missing_cells_render_as_dash_and_null() {
        let report = AnomalyReport {
            model: None,
            dataset: None,
            k: 1,
            epsilon: 1e-12,
            coverage: 3,
            rows: vec![AnomalyRow {
                condition: "clean".into(),
                noise: None,
                mean_confidence: 0.5,
                mean_eloss_metric: 0.0,
                pct_change_confidence: Some(0.0),
                pct_change_eloss: None,
            }],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("clean,0.5,0,0,-"));
        assert!(report.to_json().unwrap().contains("\"pct_change_eloss\": null"));
    }

    #[test]
    fn svg_is_well_formed() {
        let svg = curves_svg("a<b", &[("run".into(), c(&[0.1, 0.2, 0.15]))]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a&lt;b") && svg.contains("<polyline"));
        assert!(curves_svg("empty", &[]).contains("</svg>"));
    }
}
