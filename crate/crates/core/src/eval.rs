//! Per-pixel binary-classification evaluation: exact threshold sweeps (every
//! pixel is a separate prediction, pooled across the whole set), single
//! operating points for hard baselines, trapezoidal AUC, and CSV/SVG report
//! rendering.

use crate::config::Provenance;
use crate::error::{Error, Result};
use crate::raster::ClassGrid;

/// Probability maps (one per rain threshold) paired with the quantized truth.
#[derive(Debug, Clone)]
pub struct PredictionItem {
    pub probs: Vec<Vec<f32>>,
    pub truth: ClassGrid,
}

#[derive(Debug, Clone, Default)]
pub struct PredictionSet {
    pub items: Vec<PredictionItem>,
}

impl PredictionSet {
    pub fn validate(&self, threshold_count: usize) -> Result<()> {
        for (i, item) in self.items.iter().enumerate() {
            if item.probs.len() != threshold_count {
                return Err(Error::ShapeMismatch(format!(
                    "item {i}: {} probability maps for {threshold_count} thresholds",
                    item.probs.len()
                )));
            }
            let pixels = item.truth.height * item.truth.width;
            for (t, map) in item.probs.iter().enumerate() {
                if map.len() != pixels {
                    return Err(Error::ShapeMismatch(format!(
                        "item {i} map {t}: {} values for {pixels} pixels",
                        map.len()
                    )));
                }
                if let Some(&bad) = map.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(Error::Config(format!(
                        "item {i} map {t}: probability {bad} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One operating point with its exact confusion counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PrPoint {
    pub decision_threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    /// Set when TP+FP = 0 and the precision-of-1 convention applied.
    pub degenerate: bool,
}

fn point_from_counts(threshold: f64, tp: u64, fp: u64, positives: u64, negatives: u64) -> PrPoint {
    let degenerate = tp + fp == 0;
    PrPoint {
        decision_threshold: threshold,
        tp,
        fp,
        fn_count: positives - tp,
        tn: negatives - fp,
        precision: if degenerate { 1.0 } else { tp as f64 / (tp + fp) as f64 },
        recall: tp as f64 / positives as f64,
        degenerate,
    }
}

#[derive(Debug, Clone)]
pub struct PRCurve {
    pub rain_threshold_index: usize,
    /// Ordered by ascending decision threshold.
    pub points: Vec<PrPoint>,
    pub positives: u64,
    pub total: u64,
}

fn gather_pixels(set: &PredictionSet, rain_threshold_index: usize) -> Result<Vec<(f64, bool)>> {
    let mut pixels = Vec::new();
    for item in &set.items {
        let map = item.probs.get(rain_threshold_index).ok_or_else(|| {
            Error::Config(format!("no probability map for threshold index {rain_threshold_index}"))
        })?;
        for (p, &c) in map.iter().zip(&item.truth.classes) {
            pixels.push((*p as f64, c as usize > rain_threshold_index));
        }
    }
    Ok(pixels)
}

fn check_not_degenerate(
    pixels: &[(f64, bool)],
    rain_threshold_index: usize,
) -> Result<(u64, u64)> {
    let positives = pixels.iter().filter(|(_, t)| *t).count() as u64;
    let negatives = pixels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateSet {
            threshold_index: rain_threshold_index,
            reason: if positives == 0 {
                "ground truth has no positive pixels".into()
            } else {
                "ground truth has no negative pixels".into()
            },
        });
    }
    Ok((positives, negatives))
}

/// Exact PR curve: the decision threshold sweeps the sorted distinct
/// predicted probabilities plus 0 and 1; prediction is positive when
/// `p >= threshold`; counts are exact integers.
pub fn pr_curve(set: &PredictionSet, rain_threshold_index: usize) -> Result<PRCurve> {
    let mut pixels = gather_pixels(set, rain_threshold_index)?;
    let (positives, negatives) = check_not_degenerate(&pixels, rain_threshold_index)?;

    pixels.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("probabilities are finite"));
    let mut thresholds: Vec<f64> = pixels.iter().map(|(p, _)| *p).collect();
    thresholds.push(0.0);
    thresholds.push(1.0);
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    thresholds.dedup();

    // Walk thresholds ascending, maintaining suffix counts of pixels with
    // p >= threshold.
    let mut points = Vec::with_capacity(thresholds.len());
    let mut idx = 0usize; // first pixel with p >= current threshold
    let mut tp = positives;
    let mut fp = negatives;
    for &tau in &thresholds {
        while idx < pixels.len() && pixels[idx].0 < tau {
            if pixels[idx].1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            idx += 1;
        }
        points.push(point_from_counts(tau, tp, fp, positives, negatives));
    }

    Ok(PRCurve {
        rain_threshold_index,
        points,
        positives,
        total: pixels.len() as u64,
    })
}

/// Single operating point for hard {0,1} predictions: implicit decision
/// threshold 0.5.
pub fn pr_point(set: &PredictionSet, rain_threshold_index: usize) -> Result<PrPoint> {
    let pixels = gather_pixels(set, rain_threshold_index)?;
    let (positives, negatives) = check_not_degenerate(&pixels, rain_threshold_index)?;
    let mut tp = 0u64;
    let mut fp = 0u64;
    for (p, truth) in pixels {
        if p >= 0.5 {
            if truth {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    Ok(point_from_counts(0.5, tp, fp, positives, negatives))
}

pub fn f1_of(point: &PrPoint) -> f64 {
    if point.precision + point.recall == 0.0 {
        0.0
    } else {
        2.0 * point.precision * point.recall / (point.precision + point.recall)
    }
}

/// Trapezoidal area over the recall axis, walking the curve from the highest
/// decision threshold down and anchoring at recall 0 with the first point's
/// precision.
pub fn auc_pr(curve: &PRCurve) -> Result<f64> {
    if curve.points.len() < 2 {
        return Err(Error::Config(format!(
            "AUC needs at least 2 curve points, got {}",
            curve.points.len()
        )));
    }
    let mut walk: Vec<&PrPoint> = curve.points.iter().collect();
    walk.sort_by(|a, b| b.decision_threshold.partial_cmp(&a.decision_threshold).expect("finite"));
    let mut prev_recall = 0.0;
    let mut prev_precision = walk[0].precision;
    let mut area = 0.0;
    for point in walk {
        area += (point.recall - prev_recall) * (point.precision + prev_precision) / 2.0;
        prev_recall = point.recall;
        prev_precision = point.precision;
    }
    if !(0.0..=1.0 + 1e-12).contains(&area) {
        return Err(Error::Config(format!("AUC {area} outside [0, 1]")));
    }
    Ok(area.min(1.0))
}

/// Precision the curve implies at a given recall, by linear interpolation
/// between neighbouring operating points (threshold-descending walk).
pub fn precision_at_recall(curve: &PRCurve, recall: f64) -> Result<f64> {
    if curve.points.len() < 2 {
        return Err(Error::Config("curve too short".into()));
    }
    let mut walk: Vec<&PrPoint> = curve.points.iter().collect();
    walk.sort_by(|a, b| b.decision_threshold.partial_cmp(&a.decision_threshold).expect("finite"));
    let mut prev: Option<&PrPoint> = None;
    for point in walk {
        if point.recall >= recall {
            return Ok(match prev {
                None => point.precision,
                Some(p) if (point.recall - p.recall).abs() < 1e-15 => point.precision,
                Some(p) => {
                    let t = (recall - p.recall) / (point.recall - p.recall);
                    p.precision + t * (point.precision - p.precision)
                }
            });
        }
        prev = Some(point);
    }
    // Requested recall above anything the curve reaches.
    Ok(0.0)
}

// ── report rendering ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum Evaluation {
    Curve(PRCurve),
    Point { rain_threshold_index: usize, point: PrPoint },
}

#[derive(Debug, Clone)]
pub struct ModelReport {
    pub model: String,
    pub evals: Vec<Evaluation>,
}

/// `model,rain_threshold,decision_threshold,tp,fp,fn,tn,precision,recall`
/// with provenance and the quantization scheme in `#` header lines.
pub fn render_csv(reports: &[ModelReport], thresholds: &[f32], provenance: &Provenance) -> String {
    let mut out = String::new();
    out.push_str(&provenance.header_lines("# "));
    let t = thresholds.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",");
    out.push_str(&format!("# thresholds = {t}\n"));
    out.push_str("model,rain_threshold,decision_threshold,tp,fp,fn,tn,precision,recall\n");
    let mut row = |model: &str, idx: usize, p: &PrPoint| {
        out.push_str(&format!(
            "{model},{},{},{},{},{},{},{},{}\n",
            thresholds[idx], p.decision_threshold, p.tp, p.fp, p.fn_count, p.tn, p.precision, p.recall
        ));
    };
    for report in reports {
        for eval in &report.evals {
            match eval {
                Evaluation::Curve(curve) => {
                    for p in &curve.points {
                        row(&report.model, curve.rain_threshold_index, p);
                    }
                }
                Evaluation::Point { rain_threshold_index, point } => {
                    row(&report.model, *rain_threshold_index, point);
                }
            }
        }
    }
    out
}

const PANEL: f64 = 260.0;
const MARGIN: f64 = 54.0;
const GAP: f64 = 36.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn svg_x(panel: usize, recall: f64) -> f64 {
    MARGIN + panel as f64 * (PANEL + GAP) + recall * PANEL
}

fn svg_y(precision: f64) -> f64 {
    MARGIN + (1.0 - precision) * PANEL
}

/// Three-panel SVG (one panel per rain threshold): curves for probabilistic
/// models, markers for hard baselines. Pure function of its inputs, so
/// regeneration is byte-identical.
pub fn render_svg(reports: &[ModelReport], thresholds: &[f32], provenance: &Provenance) -> String {
    let width = MARGIN * 2.0 + thresholds.len() as f64 * PANEL + (thresholds.len() as f64 - 1.0) * GAP;
    let height = MARGIN * 2.0 + PANEL + 40.0;
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    s.push_str(&format!(
        "<!-- tool_version = {} | seed = {} | config_hash = {} -->\n",
        provenance.tool_version, provenance.seed, provenance.config_hash
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    for (panel, t) in thresholds.iter().enumerate() {
        let x0 = svg_x(panel, 0.0);
        let y0 = svg_y(1.0);
        s.push_str(&format!(
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{PANEL}\" height=\"{PANEL}\" fill=\"none\" stroke=\"#444\" stroke-width=\"1\"/>\n"
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">rate &#8805; {t} mm/h</text>\n",
            x0 + PANEL / 2.0,
            y0 - 10.0
        ));
        for frac in [0.0, 0.5, 1.0] {
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{frac}</text>\n",
                x0 + frac * PANEL,
                y0 + PANEL + 14.0
            ));
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{frac}</text>\n",
                x0 - 5.0,
                svg_y(frac) + 3.0
            ));
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">recall</text>\n",
            x0 + PANEL / 2.0,
            y0 + PANEL + 30.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">precision</text>\n",
        MARGIN + PANEL / 2.0,
        MARGIN + PANEL / 2.0
    ));

    for (mi, report) in reports.iter().enumerate() {
        let color = PALETTE[mi % PALETTE.len()];
        for eval in &report.evals {
            match eval {
                Evaluation::Curve(curve) => {
                    let mut pts: Vec<&PrPoint> = curve.points.iter().collect();
                    pts.sort_by(|a, b| {
                        b.decision_threshold
                            .partial_cmp(&a.decision_threshold)
                            .expect("finite")
                    });
                    let path = pts
                        .iter()
                        .map(|p| {
                            format!(
                                "{:.2},{:.2}",
                                svg_x(curve.rain_threshold_index, p.recall),
                                svg_y(p.precision)
                            )
                        })
                        .collect::<Vec<_>>()
                        .join(" ");
                    s.push_str(&format!(
                        "<polyline points=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n"
                    ));
                }
                Evaluation::Point { rain_threshold_index, point } => {
                    s.push_str(&format!(
                        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\"/>\n",
                        svg_x(*rain_threshold_index, point.recall),
                        svg_y(point.precision)
                    ));
                }
            }
        }
        s.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            MARGIN + mi as f64 * 150.0,
            height - 24.0
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            MARGIN + mi as f64 * 150.0 + 16.0,
            height - 14.0,
            report.model
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn item(probs: Vec<f32>, classes: Vec<u8>) -> PredictionItem {
        let n = classes.len();
        PredictionItem {
            probs: vec![probs; 3],
            truth: ClassGrid {
                height: 1,
                width: n,
                classes,
            },
        }
    }

    fn set_of(probs: Vec<f32>, classes: Vec<u8>) -> PredictionSet {
        PredictionSet {
            items: vec![item(probs, classes)],
        }
    }

    /// Exhaustive confusion counting at one threshold: the oracle.
    fn brute_force(pixels: &[(f64, bool)], tau: f64) -> (u64, u64, u64, u64) {
        let (mut tp, mut fp, mut fn_c, mut tn) = (0, 0, 0, 0);
        for &(p, truth) in pixels {
            match (p >= tau, truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_c += 1,
                (false, false) => tn += 1,
            }
        }
        (tp, fp, fn_c, tn)
    }

    #[test]
    fn perfect_predictor_contains_perfect_point_and_unit_auc() {
        let classes = vec![0u8, 0, 1, 2, 3, 0, 1, 0];
        let probs: Vec<f32> = classes.iter().map(|&c| if c >= 1 { 1.0 } else { 0.0 }).collect();
        let set = set_of(probs, classes);
        let curve = pr_curve(&set, 0).unwrap();
        assert!(curve
            .points
            .iter()
            .any(|p| p.precision == 1.0 && p.recall == 1.0));
        assert_eq!(auc_pr(&curve).unwrap(), 1.0);
    }

    #[test]
    fn constant_half_predictor_operating_point() {
        let classes = vec![0u8, 1, 0, 1, 0, 0, 0, 1];
        let set = set_of(vec![0.5; 8], classes);
        let curve = pr_curve(&set, 0).unwrap();
        // Thresholds 0, 0.5, 1. At tau <= 0.5 everything is positive.
        assert_eq!(curve.points.len(), 3);
        let at = |tau: f64| curve.points.iter().find(|p| p.decision_threshold == tau).unwrap();
        let base_rate = 3.0 / 8.0;
        assert_eq!(at(0.0).recall, 1.0);
        assert_eq!(at(0.0).precision, base_rate);
        assert_eq!(at(0.5).recall, 1.0);
        assert_eq!(at(0.5).precision, base_rate);
        // Above every probability: degenerate precision-1 anchor.
        assert!(at(1.0).degenerate);
        assert_eq!(at(1.0).recall, 0.0);
        assert_eq!(at(1.0).precision, 1.0);
    }

    #[test]
    fn random_sets_match_brute_force_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.gen_range(5..30);
            let classes: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4) as u8).collect();
            // Quantized probabilities create plenty of exact ties.
            let probs: Vec<f32> = (0..n).map(|_| (rng.gen_range(0..5) as f32) / 4.0).collect();
            let pixels: Vec<(f64, bool)> = probs
                .iter()
                .zip(&classes)
                .map(|(&p, &c)| (p as f64, c >= 1))
                .collect();
            if !pixels.iter().any(|(_, t)| *t) || pixels.iter().all(|(_, t)| *t) {
                continue;
            }
            let set = set_of(probs, classes);
            let curve = pr_curve(&set, 0).unwrap();
            for point in &curve.points {
                let (tp, fp, fn_c, tn) = brute_force(&pixels, point.decision_threshold);
                assert_eq!((point.tp, point.fp, point.fn_count, point.tn), (tp, fp, fn_c, tn));
            }
        }
    }

    #[test]
    fn degenerate_truth_is_an_error_naming_the_threshold() {
        let set = set_of(vec![0.5; 4], vec![0, 0, 0, 0]);
        match pr_curve(&set, 1) {
            Err(Error::DegenerateSet { threshold_index, .. }) => assert_eq!(threshold_index, 1),
            other => panic!("unexpected {other:?}"),
        }
        let all_pos = set_of(vec![0.5; 4], vec![3, 3, 3, 3]);
        assert!(pr_curve(&all_pos, 0).is_err());
    }

    #[test]
    fn hard_zero_prediction_flags_degenerate_precision() {
        let set = set_of(vec![0.0; 6], vec![0, 1, 0, 2, 0, 0]);
        let point = pr_point(&set, 0).unwrap();
        assert!(point.degenerate);
        assert_eq!(point.precision, 1.0);
        assert_eq!(point.recall, 0.0);
    }

    #[test]
    fn pr_point_matches_hand_confusion() {
        // 10 pixels, hard predictions.
        let probs = vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let truth = vec![1u8, 1, 1, 0, 0, 0, 1, 0, 1, 0];
        let set = set_of(probs, truth);
        let p = pr_point(&set, 0).unwrap();
        // predicted positive: idx 0,1,3,6,9 -> tp {0,1,6}=3, fp {3,9}=2
        assert_eq!((p.tp, p.fp, p.fn_count, p.tn), (3, 2, 2, 3));
        assert_eq!(p.precision, 0.6);
        assert_eq!(p.recall, 0.6);
    }

    #[test]
    fn pooling_concatenates_counts() {
        let a = set_of(vec![0.9, 0.1, 0.6], vec![1, 0, 0]);
        let b = set_of(vec![0.9, 0.4], vec![2, 0]);
        let mut pooled = a.clone();
        pooled.items.extend(b.items.clone());
        let pa = pr_point(&a, 0).unwrap();
        let pb = pr_point(&b, 0).unwrap();
        let pc = pr_point(&pooled, 0).unwrap();
        assert_eq!(pc.tp, pa.tp + pb.tp);
        assert_eq!(pc.fp, pa.fp + pb.fp);
        assert_eq!(pc.fn_count, pa.fn_count + pb.fn_count);
        assert_eq!(pc.tn, pa.tn + pb.tn);
    }

    #[test]
    fn positive_counts_non_increasing_with_threshold_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let classes: Vec<u8> = (0..200).map(|_| rng.gen_range(0..4) as u8).collect();
        let probs: Vec<f32> = (0..200).map(|_| rng.gen()).collect();
        let set = set_of(probs, classes);
        let mut prev = u64::MAX;
        for idx in 0..3 {
            let curve = pr_curve(&set, idx).unwrap();
            assert!(curve.positives <= prev);
            prev = curve.positives;
        }
    }

    #[test]
    fn recall_non_increasing_as_threshold_rises() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let classes: Vec<u8> = (0..300).map(|_| rng.gen_range(0..2) as u8).collect();
        let probs: Vec<f32> = (0..300).map(|_| rng.gen()).collect();
        let curve = pr_curve(&set_of(probs, classes), 0).unwrap();
        for pair in curve.points.windows(2) {
            assert!(pair[0].decision_threshold < pair[1].decision_threshold);
            assert!(pair[0].recall >= pair[1].recall);
        }
    }

    #[test]
    fn random_predictor_auc_near_base_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 10_000;
        let classes: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<f64>() < 0.2)).collect();
        let probs: Vec<f32> = (0..n).map(|_| rng.gen()).collect();
        let curve = pr_curve(&set_of(probs, classes), 0).unwrap();
        let auc = auc_pr(&curve).unwrap();
        assert!((auc - 0.2).abs() <= 0.02, "auc {auc}");
    }

    #[test]
    fn single_point_curve_rejected() {
        let curve = PRCurve {
            rain_threshold_index: 0,
            points: vec![point_from_counts(0.5, 1, 1, 2, 2)],
            positives: 2,
            total: 4,
        };
        assert!(auc_pr(&curve).is_err());
    }

    #[test]
    fn precision_at_recall_interpolates() {
        let set = set_of(
            vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2],
            vec![1, 1, 0, 1, 0, 0, 1, 0],
        );
        let curve = pr_curve(&set, 0).unwrap();
        // At recall 1 every positive is found; precision = 4/(4+fp at tau 0.2).
        let p1 = precision_at_recall(&curve, 1.0).unwrap();
        assert!((p1 - 4.0 / 7.0).abs() < 1e-12);
        // At recall 0.5 (2 of 4 positives, reachable at tau 0.8): precision 1.
        let p05 = precision_at_recall(&curve, 0.5).unwrap();
        assert_eq!(p05, 1.0);
    }

    fn sample_reports() -> (Vec<ModelReport>, Vec<f32>, Provenance) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let classes: Vec<u8> = (0..100).map(|_| rng.gen_range(0..4) as u8).collect();
        let probs: Vec<f32> = (0..100).map(|_| rng.gen()).collect();
        let set = set_of(probs, classes.clone());
        let hard = set_of(
            classes.iter().map(|&c| if c >= 1 { 1.0 } else { 0.0 }).collect(),
            classes,
        );
        let mut evals = Vec::new();
        let mut points = Vec::new();
        for idx in 0..3 {
            evals.push(Evaluation::Curve(pr_curve(&set, idx).unwrap()));
            points.push(Evaluation::Point {
                rain_threshold_index: idx,
                point: pr_point(&hard, idx).unwrap(),
            });
        }
        (
            vec![
                ModelReport { model: "unet".into(), evals },
                ModelReport { model: "persistence".into(), evals: points },
            ],
            vec![0.1, 1.0, 2.5],
            Provenance::new(5, "abc123"),
        )
    }

    #[test]
    fn csv_row_count_is_points_plus_baselines() {
        let (reports, thresholds, prov) = sample_reports();
        let csv = render_csv(&reports, &thresholds, &prov);
        let expected: usize = reports
            .iter()
            .flat_map(|r| &r.evals)
            .map(|e| match e {
                Evaluation::Curve(c) => c.points.len(),
                Evaluation::Point { .. } => 1,
            })
            .sum();
        let data_rows = csv
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("model,"))
            .count();
        assert_eq!(data_rows, expected);
        assert!(csv.starts_with("# tool_version"));
    }

    #[test]
    fn svg_is_well_formed_and_deterministic() {
        let (reports, thresholds, prov) = sample_reports();
        let svg = render_svg(&reports, &thresholds, &prov);
        assert_eq!(svg, render_svg(&reports, &thresholds, &prov));

        // Minimal well-formedness: tags balance.
        let mut stack: Vec<String> = Vec::new();
        for raw in svg.split('<').skip(1) {
            let tag = raw.split('>').next().unwrap();
            if tag.starts_with('?') || tag.starts_with("!--") || tag.ends_with('/') {
                continue;
            }
            if let Some(name) = tag.strip_prefix('/') {
                assert_eq!(stack.pop().as_deref(), Some(name.trim()), "unbalanced </{name}>");
            } else {
                stack.push(tag.split_whitespace().next().unwrap().to_string());
            }
        }
        assert!(stack.is_empty(), "unclosed tags {stack:?}");
    }
}
