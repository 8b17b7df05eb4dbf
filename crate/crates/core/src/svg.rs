//! Interval plot rendered from a serialized analysis report.
//!
//! Every glyph is computed from the JSON alone, so re-rendering a saved `report.json`
//! reproduces the plot byte for byte.

use std::fmt::Write as _;

use serde_json::Value;

use crate::error::{Error, Result};

const WIDTH: f64 = 860.0;
const LEFT: f64 = 150.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 40.0;
const BAND: f64 = 18.0;
const ANNOTATION: f64 = 16.0;
const GAP: f64 = 14.0;
const AXIS: f64 = 40.0;

/// One drawable budget row of an outcome.
struct Band {
    r2: f64,
    factor: (f64, f64),
    null_control: Option<(f64, f64)>,
    envelope: Option<(f64, f64)>,
}

struct Row {
    label: String,
    estimate: f64,
    bands: Vec<Band>,
    annotation: String,
}

fn num(v: &Value, what: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::InvalidInput(format!("report field {what} is not a number")))
}

fn pair(v: &Value, lo: &str, hi: &str) -> Option<(f64, f64)> {
    Some((v.get(lo)?.as_f64()?, v.get(hi)?.as_f64()?))
}

fn fmt_rv(name: &str, v: &Value) -> Option<String> {
    v.as_f64().map(|x| format!("{name} {x:.3}"))
}

fn parse_rows(report: &Value) -> Result<Vec<Row>> {
    let outcomes = report
        .get("outcomes")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::InvalidInput("report has no outcomes array".into()))?;
    let mut rows = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let label = o.get("label").and_then(Value::as_str).unwrap_or("?").to_string();
        let estimate = num(&o["nuc"]["estimate"], "nuc.estimate")?;
        let mut bands = Vec::new();
        for reg in o.get("regions").and_then(Value::as_array).into_iter().flatten() {
            let factor = pair(&reg["factor"], "lower", "upper")
                .ok_or_else(|| Error::InvalidInput(format!("outcome {label}: factor region missing")))?;
            bands.push(Band {
                r2: num(&reg["r2"], "r2")?,
                factor,
                null_control: pair(&reg["null_control"], "lower", "upper"),
                envelope: pair(&reg["bootstrap_factor"], "lower", "upper"),
            });
        }
        let rv = &o["robustness"];
        let cons = &o["robustness_conservative"];
        let pick = |key: &str| if cons.is_object() && cons[key].is_number() { &cons[key] } else { &rv[key] };
        let annotation = [("RV1", "rv1"), ("XRV", "xrv"), ("RVG", "rv_gamma"), ("RVGC", "rv_combined")]
            .iter()
            .filter_map(|(name, key)| fmt_rv(name, pick(key)))
            .collect::<Vec<_>>()
            .join("  ");
        rows.push(Row { label, estimate, bands, annotation });
    }
    Ok(rows)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Tick spacing of 1, 2 or 5 times a power of ten giving about five ticks.
fn tick_step(range: f64) -> f64 {
    let raw = range / 5.0;
    let base = 10f64.powf(raw.log10().floor());
    let r = raw / base;
    let mult = if r < 1.5 {
        1.0
    } else if r < 3.5 {
        2.0
    } else if r < 7.5 {
        5.0
    } else {
        10.0
    };
    mult * base
}

/// Render the interval plot for a report serialized as JSON.
pub fn render_intervals(report: &Value) -> Result<String> {
    let rows = parse_rows(report)?;
    let mut lo = 0.0_f64;
    let mut hi = 0.0_f64;
    for r in &rows {
        let mut take = |x: f64| {
            if x.is_finite() {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        };
        take(r.estimate);
        for b in &r.bands {
            for (a, c) in [Some(b.factor), b.null_control, b.envelope].into_iter().flatten() {
                take(a);
                take(c);
            }
        }
    }
    if hi - lo <= 0.0 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let plot_w = WIDTH - LEFT - RIGHT;
    let x = |v: f64| LEFT + (v.clamp(lo, hi) - lo) / (hi - lo) * plot_w;

    let row_h = |r: &Row| ANNOTATION + BAND * r.bands.len().max(1) as f64 + GAP;
    let body: f64 = rows.iter().map(row_h).sum();
    let height = TOP + body + AXIS;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH:.0}" height="{height:.0}" fill="white"/>"#);
    let budgets: Vec<String> = rows
        .first()
        .map(|r| r.bands.iter().map(|b| format!("{:.3}", b.r2)).collect())
        .unwrap_or_default();
    let _ = writeln!(
        s,
        r#"<text x="{LEFT:.0}" y="20" font-size="12">Ignorance regions at R2 = {} (box: factor bound, bar: with null controls, whisker: bootstrap envelope)</text>"#,
        budgets.join(", ")
    );

    let axis_y = TOP + body;
    let zero = x(0.0);
    let _ = writeln!(
        s,
        r##"<line class="zero" x1="{zero:.2}" y1="{TOP:.2}" x2="{zero:.2}" y2="{axis_y:.2}" stroke="#888" stroke-dasharray="4,3"/>"##
    );

    let mut y = TOP;
    for r in &rows {
        let _ = writeln!(
            s,
            r##"<text class="rv" x="{LEFT:.2}" y="{:.2}" fill="#444">{}</text>"##,
            y + ANNOTATION - 4.0,
            escape(&r.annotation)
        );
        let mid_rows = y + ANNOTATION + BAND * r.bands.len().max(1) as f64 / 2.0;
        let _ = writeln!(
            s,
            r#"<text class="label" x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 8.0,
            mid_rows + 4.0,
            escape(&r.label)
        );
        let mut by = y + ANNOTATION;
        for b in &r.bands {
            let cy = by + BAND / 2.0;
            if let Some((a, c)) = b.envelope {
                let _ = writeln!(
                    s,
                    r##"<line class="envelope" x1="{:.2}" y1="{cy:.2}" x2="{:.2}" y2="{cy:.2}" stroke="#2a6fbb" stroke-width="1"/>"##,
                    x(a),
                    x(c)
                );
            }
            let (a, c) = b.factor;
            let _ = writeln!(
                s,
                r##"<rect class="region" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#222"/>"##,
                x(a),
                cy - BAND * 0.3,
                (x(c) - x(a)).max(0.5),
                BAND * 0.6
            );
            if let Some((a, c)) = b.null_control {
                let _ = writeln!(
                    s,
                    r##"<line class="nc" x1="{:.2}" y1="{cy:.2}" x2="{:.2}" y2="{cy:.2}" stroke="#c0392b" stroke-width="4"/>"##,
                    x(a),
                    x(c).max(x(a) + 0.5)
                );
            }
            let _ = writeln!(
                s,
                r#"<circle class="nuc" cx="{:.2}" cy="{cy:.2}" r="2.5" fill="black"/>"#,
                x(r.estimate)
            );
            by += BAND;
        }
        y += row_h(r);
    }

    let _ = writeln!(
        s,
        r#"<line x1="{LEFT:.2}" y1="{axis_y:.2}" x2="{:.2}" y2="{axis_y:.2}" stroke="black"/>"#,
        WIDTH - RIGHT
    );
    let step = tick_step(hi - lo);
    let mut t = (lo / step).ceil() * step;
    while t <= hi + 1e-12 * step {
        let tx = x(t);
        // avoid printing "-0.00"
        let shown = if t.abs() < 1e-9 * step { 0.0 } else { t };
        let _ = writeln!(
            s,
            r#"<line x1="{tx:.2}" y1="{axis_y:.2}" x2="{tx:.2}" y2="{:.2}" stroke="black"/><text x="{tx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            axis_y + 5.0,
            axis_y + 18.0,
            format_tick(shown, step)
        );
        t += step;
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn format_tick(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    format!("{v:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn report() -> Value {
        json!({
            "outcomes": [
                {
                    "label": "y<1>",
                    "nuc": {"estimate": 0.5},
                    "regions": [
                        {"r2": 0.5, "factor": {"lower": -0.5, "upper": 1.5}, "null_control": {"lower": 0.2, "upper": 0.8},
                         "bootstrap_factor": {"lower": -0.9, "upper": 1.9}}
                    ],
                    "robustness": {"rv1": 0.1, "xrv": 0.05, "rv_gamma": 0.3, "rv_combined": null},
                    "robustness_conservative": null
                },
                {
                    "label": "y2",
                    "nuc": {"estimate": -1.0},
                    "regions": [
                        {"r2": 0.5, "factor": {"lower": -1.2, "upper": -0.8}, "null_control": null, "bootstrap_factor": null}
                    ],
                    "robustness": {"rv1": 0.4, "xrv": 0.2, "rv_gamma": null, "rv_combined": null},
                    "robustness_conservative": {"rv1": 0.35, "xrv": 0.15, "rv_gamma": null, "rv_combined": null}
                }
            ]
        })
    }

    #[test]
    fn one_box_per_outcome_and_budget() {
        let svg = render_intervals(&report()).unwrap();
        assert_eq!(svg.matches(r#"class="region""#).count(), 2);
        assert_eq!(svg.matches(r#"class="nc""#).count(), 1);
        assert_eq!(svg.matches(r#"class="envelope""#).count(), 1);
        assert_eq!(svg.matches(r#"class="zero""#).count(), 1);
        assert!(svg.contains("y&lt;1&gt;"));
        // conservative values replace point values once available
        assert!(svg.contains("RV1 0.350"));
        assert!(svg.contains("RVG 0.300"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn rendering_is_a_function_of_the_json() {
        let v = report();
        let text = serde_json::to_string(&v).unwrap();
        let back: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(render_intervals(&v).unwrap(), render_intervals(&back).unwrap());
    }

    #[test]
    fn zero_line_sits_at_zero() {
        let svg = render_intervals(&report()).unwrap();
        // range [-1.2, 1.9] padded by 5%: zero maps to LEFT + (0 - lo) / (hi - lo) * plot width
        let (lo, hi) = (-1.2 - 0.155, 1.9 + 0.155);
        let expect = LEFT + (0.0 - lo) / (hi - lo) * (WIDTH - LEFT - RIGHT);
        assert!(svg.contains(&format!(r#"x1="{expect:.2}""#)));
    }

    #[test]
    fn malformed_report_is_rejected() {
        assert!(render_intervals(&json!({"nothing": 1})).is_err());
        assert!(render_intervals(&json!({"outcomes": [{"label": "a", "nuc": {}}]})).is_err());
    }

    #[test]
    fn tick_steps_are_round() {
        assert_eq!(tick_step(10.0), 2.0);
        assert_eq!(tick_step(1.0), 0.2);
        assert!((tick_step(0.03) - 0.005).abs() < 1e-15);
    }
}
