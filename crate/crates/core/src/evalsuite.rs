//! Generation statistics, length/reward Pareto fronts, polynomial trend
//! fits, and the metrics.csv / scatter.svg artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_with_rng, Policy, TokenId};
use crate::reward::RewardFunction;

/// Field order is the metrics.csv column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub algorithm: String,
    pub beta: f64,
    pub seed: u64,
    pub mean_reward: f64,
    pub mean_length: f64,
    pub repetition_ratio: f64,
    pub n_samples: usize,
}

pub const METRICS_HEADER: &str = "step,algorithm,beta,seed,mean_reward,mean_length,repetition_ratio,n_samples";

/// Longest suffix made of a repeated block of period at most 3, over `|y|`.
///
/// The block must occur at least twice before `eos`; the terminal `eos`
/// always belongs to the suffix, so a completion without any repetition
/// scores `1/|y|` and a single repeated token scores 1.
pub fn repetition_ratio(completion: &[TokenId]) -> f64 {
    let n = completion.len();
    if n == 0 {
        return 0.0;
    }
    let content = &completion[..n - 1];
    let mut best = 0;
    for p in 1..=3usize {
        if content.len() < 2 * p {
            continue;
        }
        let mut len = p;
        while len < content.len() && content[content.len() - len - 1] == content[content.len() - len - 1 + p] {
            len += 1;
        }
        if len >= 2 * p {
            best = best.max(len);
        }
    }
    (best + 1) as f64 / n as f64
}

/// `n` ancestral samples, prompts taken round-robin; sample `i` draws from
/// stream `i` of `seed`, so results do not depend on the thread count.
/// `algorithm`, `beta` and `step` are left for the caller to fill.
pub fn evaluate_generations<P, R>(policy: &P, prompts: &[Vec<TokenId>], scorer: &R, n: usize, seed: u64) -> Result<EvalRecord>
where
    P: Policy + ?Sized,
    R: RewardFunction + ?Sized,
{
    if n == 0 || prompts.is_empty() {
        return Err(Error::domain("evaluation needs at least one sample and one prompt"));
    }
    let per: Vec<Result<(f64, f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let prompt = &prompts[i % prompts.len()];
            let s = sample_with_rng(policy, prompt, &mut rng, 1.0)?;
            let r = scorer.reward(prompt, &s.completion)?;
            Ok((r, s.len() as f64, repetition_ratio(&s.completion)))
        })
        .collect();
    let (mut r, mut l, mut rep) = (0.0, 0.0, 0.0);
    for x in per {
        let (a, b, c) = x?;
        r += a;
        l += b;
        rep += c;
    }
    let nf = n as f64;
    Ok(EvalRecord {
        step: 0,
        algorithm: String::new(),
        beta: 0.0,
        seed,
        mean_reward: r / nf,
        mean_length: l / nf,
        repetition_ratio: rep / nf,
        n_samples: n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParetoPoint {
    pub length: f64,
    pub reward: f64,
    /// Index of the point in the input.
    pub source: usize,
}

/// Points not dominated by a shorter-or-equal, higher-or-equal point,
/// sorted by length. Duplicates collapse to their first occurrence.
pub fn pareto_front(points: &[(f64, f64)]) -> Result<Vec<ParetoPoint>> {
    if points.is_empty() {
        return Err(Error::domain("pareto front of an empty set"));
    }
    if points.iter().any(|(l, r)| !l.is_finite() || !r.is_finite()) {
        return Err(Error::domain("non-finite point"));
    }
    let mut idx: Vec<usize> = (0..points.len()).collect();
    // by length, then best reward first, then input order
    idx.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[b].1.total_cmp(&points[a].1))
            .then(a.cmp(&b))
    });
    let mut front: Vec<ParetoPoint> = Vec::new();
    for i in idx {
        let (length, reward) = points[i];
        if front.last().is_some_and(|p| p.reward >= reward) {
            continue;
        }
        front.push(ParetoPoint { length, reward, source: i });
    }
    Ok(front)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolyFit {
    /// Ascending powers: `c[0] + c[1] x + ...`.
    pub coefficients: Vec<f64>,
    pub residual_norm: f64,
}

impl PolyFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

/// Least-squares polynomial `reward = f(length)`.
pub fn polyfit(points: &[(f64, f64)], degree: usize) -> Result<PolyFit> {
    if points.len() <= degree {
        return Err(Error::domain(format!(
            "degree {degree} needs more than {degree} points, got {}",
            points.len()
        )));
    }
    let a = DMatrix::from_fn(points.len(), degree + 1, |i, j| points[i].0.powi(j as i32));
    let b = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let svd = a.clone().svd(true, true);
    let tol = 1e-10 * svd.singular_values.max();
    if svd.rank(tol) < degree + 1 {
        return Err(Error::Numerical(format!("rank-deficient fit of degree {degree}")));
    }
    let c = svd.solve(&b, tol).map_err(|e| Error::Numerical(e.to_string()))?;
    let residual_norm = (a * &c - b).norm();
    Ok(PolyFit {
        coefficients: c.iter().cloned().collect(),
        residual_norm,
    })
}

/// Keep records at or before `fraction` of the run.
pub fn within_cutoff(records: &[EvalRecord], total_steps: usize, fraction: f64) -> Vec<EvalRecord> {
    let limit = fraction * total_steps as f64;
    records.iter().filter(|r| r.step as f64 <= limit).cloned().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinOutcome {
    pub upper: f64,
    /// Best reward reachable within the bin's length budget, per front.
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub a_weakly_dominates: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinComparison {
    pub bins: Vec<BinOutcome>,
    pub a_wins: usize,
    pub comparable: usize,
}

impl BinComparison {
    pub fn majority(&self) -> bool {
        self.comparable > 0 && 2 * self.a_wins > self.comparable
    }
}

/// Compare two fronts on `n_bins` equal-width length bins spanning both.
///
/// In a bin with upper edge `u`, each front offers the best reward among
/// its points of length `<= u`. Front `a` weakly dominates there when its
/// offer is at least `b`'s; a bin is comparable once `b` has an offer
/// (if only `a` has one, `a` wins; if neither, it is skipped).
pub fn dominance_by_length_bins(a: &[ParetoPoint], b: &[ParetoPoint], n_bins: usize) -> Result<BinComparison> {
    if a.is_empty() || b.is_empty() || n_bins == 0 {
        return Err(Error::domain("need two non-empty fronts and at least one bin"));
    }
    let lo = a.iter().chain(b).map(|p| p.length).fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).map(|p| p.length).fold(f64::NEG_INFINITY, f64::max);
    let offer = |f: &[ParetoPoint], u: f64| {
        f.iter()
            .filter(|p| p.length <= u + 1e-12)
            .map(|p| p.reward)
            .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))))
    };
    let mut out = BinComparison {
        bins: Vec::new(),
        a_wins: 0,
        comparable: 0,
    };
    for k in 1..=n_bins {
        let upper = if k == n_bins { hi } else { lo + (hi - lo) * k as f64 / n_bins as f64 };
        let (oa, ob) = (offer(a, upper), offer(b, upper));
        let verdict = match (oa, ob) {
            (None, None) => None,
            (Some(_), None) => Some(true),
            (None, Some(_)) => Some(false),
            (Some(x), Some(y)) => Some(x >= y),
        };
        if let Some(v) = verdict {
            out.comparable += 1;
            out.a_wins += v as usize;
        }
        out.bins.push(BinOutcome {
            upper,
            a: oa,
            b: ob,
            a_weakly_dominates: verdict,
        });
    }
    Ok(out)
}

pub fn write_metrics_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(wrap)?;
    w.write_record(METRICS_HEADER.split(',')).map_err(wrap)?;
    for r in records {
        w.serialize(r).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let header = rd.headers().map_err(|e| Error::io(path, std::io::Error::other(e)))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != METRICS_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "unexpected metrics header".into(),
        });
    }
    rd.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Scatter of (mean length, mean reward), one circle per record, with the
/// Pareto front and an optional fitted curve.
pub fn scatter_svg(records: &[EvalRecord], fit: Option<&PolyFit>) -> String {
    let (w, h, m) = (640.0, 480.0, 50.0);
    let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.mean_length, r.mean_reward)).collect();
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(|p| p.0);
    let (y0, y1) = span(|p| p.1);
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g stroke="black"><line x1="{m}" y1="{}" x2="{}" y2="{}"/><line x1="{m}" y1="{m}" x2="{m}" y2="{}"/></g>"#,
        h - m,
        w - m,
        h - m,
        h - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">mean length</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="10" y="{}" font-size="12">mean reward</text>"#, m - 10.0);
    let _ = writeln!(s, r#"<g class="markers" fill="steelblue">"#);
    for p in &pts {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3"/>"#, sx(p.0), sy(p.1));
    }
    let _ = writeln!(s, "</g>");
    if let Some(fit) = fit {
        let path: Vec<String> = (0..=50)
            .map(|i| {
                let x = x0 + (x1 - x0) * i as f64 / 50.0;
                format!("{:.2},{:.2}", sx(x), sy(fit.eval(x).clamp(y0 - (y1 - y0), y1 + (y1 - y0))))
            })
            .collect();
        let _ = writeln!(s, r#"<polyline class="fit" fill="none" stroke="gray" points="{}"/>"#, path.join(" "));
    }
    if let Ok(front) = pareto_front(&pts) {
        let path: Vec<String> = front.iter().map(|p| format!("{:.2},{:.2}", sx(p.length), sy(p.reward))).collect();
        let _ = writeln!(s, r#"<polyline class="front" fill="none" stroke="crimson" points="{}"/>"#, path.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

/// Write `metrics.csv` and, when asked, `scatter.svg` (with a fit of
/// `degree` when enough distinct points exist).
pub fn export(records: &[EvalRecord], out_dir: &Path, svg: bool, degree: usize) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_metrics_csv(&out_dir.join("metrics.csv"), records)?;
    if svg {
        let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.mean_length, r.mean_reward)).collect();
        let fit = polyfit(&pts, degree).ok();
        let path = out_dir.join("scatter.svg");
        fs::write(&path, scatter_svg(records, fit.as_ref())).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
