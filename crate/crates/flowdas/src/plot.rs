//! Self-contained SVG line charts: truth, ensemble mean with a 10-90%
//! band, and observations mapped back to state space.

use std::fmt::Write;

use flowdas_core::dynamics::ObservationOperator;

use crate::error::{CliError, Result};

const W: f64 = 720.0;
const H: f64 = 360.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 40.0;

/// Ensemble summary per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    match sorted.get(i + 1) {
        Some(next) => sorted[i] + frac * (next - sorted[i]),
        None => sorted[i],
    }
}

/// Mean and 10%/90% quantiles across members; each member is a series of
/// equal length.
pub fn band(members: &[Vec<f64>]) -> Result<Band> {
    let first = members
        .first()
        .ok_or_else(|| CliError::Data("empty ensemble: nothing to summarise".into()))?;
    let len = first.len();
    if members.iter().any(|m| m.len() != len) {
        return Err(CliError::Data("ensemble members differ in length".into()));
    }
    let mut b = Band {
        mean: Vec::with_capacity(len),
        lo: Vec::with_capacity(len),
        hi: Vec::with_capacity(len),
    };
    for k in 0..len {
        let mut col: Vec<f64> = members.iter().map(|m| m[k]).collect();
        b.mean.push(col.iter().sum::<f64>() / col.len() as f64);
        col.sort_by(f64::total_cmp);
        b.lo.push(quantile(&col, 0.1));
        b.hi.push(quantile(&col, 0.9));
    }
    Ok(b)
}

/// State coordinate `coord` implied by observation `y`, when the operator
/// determines it.
pub fn observed_coordinate(op: &ObservationOperator, y: &[f64], coord: usize) -> Option<f64> {
    match op {
        ObservationOperator::ArctanFirst if coord == 0 => {
            (y[0].abs() < std::f64::consts::FRAC_PI_2).then(|| y[0].tan())
        }
        ObservationOperator::Cube if coord == 0 => Some(y[0].cbrt()),
        ObservationOperator::Identity => y.get(coord).copied(),
        ObservationOperator::Mask(idx) => idx.iter().position(|&i| i == coord).map(|j| y[j]),
        _ => None,
    }
}

#[derive(Debug, Clone, Default)]
pub struct Panel {
    pub title: String,
    pub truth: Option<Vec<f64>>,
    pub ensemble: Option<Band>,
    /// `(step, value)` pairs.
    pub observations: Vec<(usize, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(out: &mut String, xs: impl Iterator<Item = (f64, f64)>, attrs: &str) {
    let pts: Vec<String> = xs.map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(out, r#"<polyline points="{}" fill="none" {attrs}/>"#, pts.join(" "));
}

pub fn render(panel: &Panel) -> Result<String> {
    if panel.truth.is_none() && panel.ensemble.is_none() {
        return Err(CliError::Data("nothing to plot".into()));
    }
    let len = panel
        .truth
        .as_ref()
        .map(Vec::len)
        .into_iter()
        .chain(panel.ensemble.as_ref().map(|b| b.mean.len()))
        .max()
        .unwrap_or(0);
    if len == 0 {
        return Err(CliError::Data("empty series".into()));
    }
    let mut values: Vec<f64> = Vec::new();
    if let Some(t) = &panel.truth {
        values.extend(t);
    }
    if let Some(b) = &panel.ensemble {
        values.extend(b.lo.iter().chain(&b.hi).chain(&b.mean));
    }
    values.extend(panel.observations.iter().map(|o| o.1));
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical("non-finite value in plot series".into()));
    }
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let x_max = (len - 1).max(1) as f64;
    let px = |k: f64| LEFT + k / x_max * (W - LEFT - RIGHT);
    let py = |v: f64| TOP + (hi - v) / (hi - lo) * (H - TOP - BOTTOM);

    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="20" font-size="13">{}</text>"#,
        escape(&panel.title)
    );
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(
        s,
        r##"<path d="M{x0:.2},{y0:.2} L{x0:.2},{y1:.2} L{x1:.2},{y1:.2}" fill="none" stroke="#444"/>"##
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="#444"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"##,
            x0 - 4.0,
            x0 - 6.0,
            y + 4.0
        );
    }
    let tick = ((len - 1) as f64 / 8.0).ceil().max(1.0) as usize;
    for k in (0..len).step_by(tick) {
        let x = px(k as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{y1:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{k}</text>"##,
            y1 + 4.0,
            y1 + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">step</text>"#,
        (x0 + x1) / 2.0,
        H - 6.0
    );
    if let Some(b) = &panel.ensemble {
        let pts: Vec<String> = (0..b.lo.len())
            .map(|k| (k, b.lo[k]))
            .chain((0..b.hi.len()).rev().map(|k| (k, b.hi[k])))
            .map(|(k, v)| format!("{:.2},{:.2}", px(k as f64), py(v)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##,
            pts.join(" ")
        );
        polyline(
            &mut s,
            b.mean.iter().enumerate().map(|(k, v)| (px(k as f64), py(*v))),
            r##"stroke="#08519c" stroke-width="1.5""##,
        );
    }
    if let Some(t) = &panel.truth {
        polyline(
            &mut s,
            t.iter().enumerate().map(|(k, v)| (px(k as f64), py(*v))),
            r##"stroke="black" stroke-width="1.5""##,
        );
    }
    for (k, v) in &panel.observations {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#d62728"/>"##,
            px(*k as f64),
            py(*v)
        );
    }
    let mut legend = Vec::new();
    if panel.truth.is_some() {
        legend.push(("black", "truth"));
    }
    if panel.ensemble.is_some() {
        legend.push(("#08519c", "ensemble mean, 10-90% band"));
    }
    if !panel.observations.is_empty() {
        legend.push(("#d62728", "observations"));
    }
    for (i, (color, label)) in legend.iter().enumerate() {
        let x = x1 - 200.0;
        let y = 20.0 + 14.0 * i as f64 - 8.0 * (legend.len() - 1) as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="10" height="4" fill="{color}"/><text x="{:.2}" y="{:.2}">{label}</text>"#,
            y - 4.0,
            x + 14.0,
            y
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_quantiles() {
        let members: Vec<Vec<f64>> = (0..11).map(|i| vec![i as f64, 0.0]).collect();
        let b = band(&members).unwrap();
        assert_eq!(b.mean, vec![5.0, 0.0]);
        assert_eq!(b.lo, vec![1.0, 0.0]);
        assert_eq!(b.hi, vec![9.0, 0.0]);
        assert!(band(&[]).is_err());
    }

    #[test]
    fn observation_inverses() {
        assert!(
            (observed_coordinate(&ObservationOperator::ArctanFirst, &[1.0f64.atan()], 0).unwrap() - 1.0).abs() < 1e-12
        );
        assert_eq!(observed_coordinate(&ObservationOperator::ArctanFirst, &[0.3], 1), None);
        assert_eq!(observed_coordinate(&ObservationOperator::ArctanFirst, &[2.0], 0), None);
        assert_eq!(observed_coordinate(&ObservationOperator::Cube, &[-8.0], 0), Some(-2.0));
        assert_eq!(
            observed_coordinate(&ObservationOperator::Mask(vec![2]), &[5.0], 2),
            Some(5.0)
        );
        assert_eq!(
            observed_coordinate(&ObservationOperator::Mask(vec![2]), &[5.0], 0),
            None
        );
    }

    #[test]
    fn render_is_deterministic_and_needs_a_series() {
        let p = Panel {
            title: "x0 <case 0>".into(),
            truth: Some(vec![0.0, 1.0, 0.5]),
            ensemble: Some(band(&[vec![0.0, 0.9, 0.4], vec![0.0, 1.1, 0.7]]).unwrap()),
            observations: vec![(1, 1.05), (2, 0.45)],
        };
        let a = render(&p).unwrap();
        assert_eq!(a, render(&p).unwrap());
        assert!(a.starts_with("<?xml") && a.ends_with("</svg>\n"));
        assert!(a.contains("&lt;case 0&gt;"));
        assert_eq!(a.matches("<circle").count(), 2);
        let truth_only = render(&Panel {
            ensemble: None,
            ..p.clone()
        })
        .unwrap();
        assert!(!truth_only.contains("<polygon"));
        assert!(render(&Panel::default()).is_err());
    }
}
